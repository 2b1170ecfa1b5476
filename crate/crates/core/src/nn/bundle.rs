use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{derive_seed, Initializer, ParamSet};
use super::unit::{UnitPair, UnitParams};
use super::{
    Discriminator, DiscriminatorSpec, DownGenerator, DownGeneratorSpec, Frozen, FrozenUnit, Network,
    SrGenerator, SrGeneratorSpec, SuperResolver,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "sr-cyclegan")]
    SrCycleGan,
    #[serde(rename = "sr-unit")]
    SrUnit,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SrCycleGan => "sr-cyclegan",
            Variant::SrUnit => "sr-unit",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr-cyclegan" => Ok(Variant::SrCycleGan),
            "sr-unit" => Ok(Variant::SrUnit),
            other => Err(Error::param(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture of every network in a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelSpecs {
    pub sr: SrGeneratorSpec,
    pub down: DownGeneratorSpec,
    /// Discriminator for the low-resolution (clinical) domain.
    pub disc_lr: DiscriminatorSpec,
    /// Discriminator for the high-resolution (micro) domain.
    pub disc_hr: DiscriminatorSpec,
}

impl ModelSpecs {
    /// Same layout with every width set to `width` and `res_blocks` residual
    /// blocks; handy for desk-scale runs.
    pub fn compact(width: usize, res_blocks: usize) -> Self {
        Self {
            sr: SrGeneratorSpec {
                base_width: width,
                n_res_blocks: res_blocks,
                ..Default::default()
            },
            down: DownGeneratorSpec {
                base_width: width,
                n_res_blocks: res_blocks,
                ..Default::default()
            },
            disc_lr: DiscriminatorSpec {
                base_width: width,
                ..Default::default()
            },
            disc_hr: DiscriminatorSpec {
                base_width: width,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sr.validate()?;
        self.down.validate()?;
        self.disc_lr.validate()?;
        self.disc_hr.validate()
    }
}

/// Every parameter of a model. For the UNIT variant `g1` holds the
/// low-to-high path (LR encoder and HR decoder), `g2` the high-to-low path,
/// and `unit_latent` the shared latent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub variant: Variant,
    pub specs: ModelSpecs,
    pub g1: ParamSet,
    pub g2: ParamSet,
    pub dx: ParamSet,
    pub dy: ParamSet,
    pub unit_latent: Option<ParamSet>,
}

pub(crate) const DX_PREFIX: &str = "dx";
pub(crate) const DY_PREFIX: &str = "dy";

impl ModelBundle {
    pub fn init(variant: Variant, specs: ModelSpecs, seed: u64) -> Result<Self> {
        specs.validate()?;
        let init_net = |net: &dyn Network, stream: u64| -> Result<ParamSet> {
            let mut p = ParamSet::new();
            net.init_params(&mut Initializer::new(derive_seed(seed, stream)), &mut p)?;
            Ok(p)
        };
        let dx = init_net(&Discriminator::new(specs.disc_lr, DX_PREFIX)?, 3)?;
        let dy = init_net(&Discriminator::new(specs.disc_hr, DY_PREFIX)?, 4)?;
        let bundle = match variant {
            Variant::SrCycleGan => Self {
                variant,
                specs,
                g1: init_net(&SrGenerator::new(specs.sr, "g1")?, 1)?,
                g2: init_net(&DownGenerator::new(specs.down, "g2")?, 2)?,
                dx,
                dy,
                unit_latent: None,
            },
            Variant::SrUnit => {
                let pair = UnitPair::new(&specs.sr, &specs.down)?;
                let UnitParams {
                    lr_to_hr,
                    hr_to_lr,
                    shared,
                } = pair.init_params(derive_seed(seed, 5))?;
                Self {
                    variant,
                    specs,
                    g1: lr_to_hr,
                    g2: hr_to_lr,
                    dx,
                    dy,
                    unit_latent: Some(shared),
                }
            }
        };
        Ok(bundle)
    }

    /// Checks the variant/latent invariant and that every parameter has the
    /// name and shape its `ModelSpecs` call for.
    pub fn validate(&self) -> Result<()> {
        match (self.variant, &self.unit_latent) {
            (Variant::SrUnit, None) => {
                return Err(Error::Construction("sr-unit bundle without latent parameters".into()))
            }
            (Variant::SrCycleGan, Some(_)) => {
                return Err(Error::Construction("sr-cyclegan bundle with latent parameters".into()))
            }
            _ => {}
        }
        let reference = Self::init(self.variant, self.specs, 0)?;
        for (which, have, want) in [
            ("g1", &self.g1, &reference.g1),
            ("g2", &self.g2, &reference.g2),
            ("dx", &self.dx, &reference.dx),
            ("dy", &self.dy, &reference.dy),
        ]
        .into_iter()
        .chain(
            self.unit_latent
                .iter()
                .zip(reference.unit_latent.iter())
                .map(|(h, w)| ("unit_latent", h, w)),
        ) {
            if have.len() != want.len()
                || have
                    .iter()
                    .zip(want.iter())
                    .any(|((hn, ht), (wn, wt))| hn != wn || ht.shape() != wt.shape())
            {
                return Err(Error::Construction(format!(
                    "{which} parameters do not match the declared specs"
                )));
            }
        }
        Ok(())
    }

    pub fn sr_generator(&self) -> Result<SrGenerator> {
        SrGenerator::new(self.specs.sr, "g1")
    }

    pub fn down_generator(&self) -> Result<DownGenerator> {
        DownGenerator::new(self.specs.down, "g2")
    }

    pub fn disc_lr(&self) -> Result<Discriminator> {
        Discriminator::new(self.specs.disc_lr, DX_PREFIX)
    }

    pub fn disc_hr(&self) -> Result<Discriminator> {
        Discriminator::new(self.specs.disc_hr, DY_PREFIX)
    }

    pub fn unit_pair(&self) -> Result<UnitPair> {
        UnitPair::new(&self.specs.sr, &self.specs.down)
    }

    pub fn frozen_unit(&self) -> Result<FrozenUnit> {
        let shared = self
            .unit_latent
            .clone()
            .ok_or_else(|| Error::Construction("not an sr-unit bundle".into()))?;
        Ok(FrozenUnit::new(
            self.unit_pair()?,
            UnitParams {
                lr_to_hr: self.g1.clone(),
                hr_to_lr: self.g2.clone(),
                shared,
            },
        ))
    }

    /// The low-to-high translator used for inference.
    pub fn super_resolver(&self) -> Result<Box<dyn SuperResolver + Send>> {
        Ok(match self.variant {
            Variant::SrCycleGan => Box::new(Frozen::new(self.sr_generator()?, self.g1.clone())),
            Variant::SrUnit => Box::new(self.frozen_unit()?),
        })
    }

    /// All parameter groups with their tags, in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut g = vec![
            ("g1", &self.g1),
            ("g2", &self.g2),
            ("dx", &self.dx),
            ("dy", &self.dy),
        ];
        if let Some(l) = &self.unit_latent {
            g.push(("unit_latent", l));
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, p)| p.numel()).sum()
    }
}
