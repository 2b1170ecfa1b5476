//! Generators, discriminators and the shared-latent pair, plus the
//! [`ModelBundle`] that holds a trained model's parameters.

mod bundle;
mod discriminator;
mod generator;
mod layers;
mod params;
pub mod unit;

pub use bundle::{ModelBundle, ModelSpecs, Variant};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{DownGenerator, DownGeneratorSpec, SrGenerator, SrGeneratorSpec};
pub use params::{derive_seed, Bindings, Initializer, ParamSet};
pub use unit::{UnitPair, UnitParams};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::patch::ImagePatch;
use crate::tensor::Tensor;

/// A network whose parameters live outside it, in a [`ParamSet`].
pub trait Network {
    fn init_params(&self, init: &mut Initializer, params: &mut ParamSet) -> Result<()>;

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var>;
}

/// Anything that turns a low-resolution slice into an 8x larger one.
pub trait SuperResolver: Sync {
    fn super_resolve(&self, lr: &ImagePatch) -> Result<ImagePatch>;
}

/// A network together with fixed parameters, for inference.
#[derive(Debug, Clone)]
pub struct Frozen<N> {
    net: N,
    params: ParamSet,
}

impl<N: Network> Frozen<N> {
    pub fn new(net: N, params: ParamSet) -> Self {
        Self { net, params }
    }

    pub fn from_seed(net: N, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        net.init_params(&mut Initializer::new(seed), &mut params)?;
        Ok(Self { net, params })
    }

    pub fn net(&self) -> &N {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    /// Forward pass on an `[N, 1, H, W]` tensor.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = Bindings::of(&mut tape, &[&self.params], false);
        let x = tape.constant(input.clone());
        let out = self.net.forward(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn apply(&self, patch: &ImagePatch) -> Result<ImagePatch> {
        let out = self.forward(&Tensor::from_patch(patch))?;
        Ok(out.to_patches()?.remove(0))
    }
}

impl SuperResolver for Frozen<SrGenerator> {
    fn super_resolve(&self, lr: &ImagePatch) -> Result<ImagePatch> {
        self.apply(lr)
    }
}

/// Builds an SR generator with seeded parameters.
pub fn build_sr_generator(spec: SrGeneratorSpec, seed: u64) -> Result<Frozen<SrGenerator>> {
    Frozen::from_seed(SrGenerator::new(spec, "g1")?, seed)
}

pub fn build_down_generator(spec: DownGeneratorSpec, seed: u64) -> Result<Frozen<DownGenerator>> {
    Frozen::from_seed(DownGenerator::new(spec, "g2")?, seed)
}

pub fn build_discriminator(spec: DiscriminatorSpec, seed: u64) -> Result<Frozen<Discriminator>> {
    Frozen::from_seed(Discriminator::new(spec, "d")?, seed)
}

/// A shared-latent pair with its parameters.
#[derive(Debug, Clone)]
pub struct FrozenUnit {
    pair: UnitPair,
    params: UnitParams,
}

/// Which domain a UNIT encoder or decoder works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Low,
    High,
}

impl FrozenUnit {
    pub fn new(pair: UnitPair, params: UnitParams) -> Self {
        Self { pair, params }
    }

    pub fn pair(&self) -> &UnitPair {
        &self.pair
    }

    pub fn params(&self) -> &UnitParams {
        &self.params
    }

    fn run(&self, input: &Tensor, path: &[(Domain, bool)]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = &self.params;
        let b = Bindings::of(&mut tape, &[&p.lr_to_hr, &p.hr_to_lr, &p.shared], false);
        let mut v = tape.constant(input.clone());
        for &(domain, encode) in path {
            v = match (domain, encode) {
                (Domain::Low, true) => self.pair.encode_lr(&mut tape, &b, v)?,
                (Domain::High, true) => self.pair.encode_hr(&mut tape, &b, v)?,
                (Domain::Low, false) => self.pair.decode_lr(&mut tape, &b, v)?,
                (Domain::High, false) => self.pair.decode_hr(&mut tape, &b, v)?,
            };
        }
        Ok(tape.value(v).clone())
    }

    pub fn encode(&self, domain: Domain, input: &Tensor) -> Result<Tensor> {
        self.run(input, &[(domain, true)])
    }

    pub fn decode(&self, domain: Domain, latent: &Tensor) -> Result<Tensor> {
        self.run(latent, &[(domain, false)])
    }

    /// Encode in `from`, decode in `to`.
    pub fn translate(&self, from: Domain, to: Domain, input: &Tensor) -> Result<Tensor> {
        self.run(input, &[(from, true), (to, false)])
    }
}

impl SuperResolver for FrozenUnit {
    fn super_resolve(&self, lr: &ImagePatch) -> Result<ImagePatch> {
        let out = self.translate(Domain::Low, Domain::High, &Tensor::from_patch(lr))?;
        Ok(out.to_patches()?.remove(0))
    }
}

/// Builds the shared-latent encoder/decoder pair with seeded parameters.
pub fn build_unit_pair(sr: SrGeneratorSpec, down: DownGeneratorSpec, seed: u64) -> Result<FrozenUnit> {
    let pair = UnitPair::new(&sr, &down)?;
    let params = pair.init_params(seed)?;
    Ok(FrozenUnit { pair, params })
}
