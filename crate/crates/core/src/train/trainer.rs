//! One training iteration: a generator half-step followed by a
//! discriminator half-step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::data::{PatchSample, PatchSet};
use crate::error::{Error, Result};
use crate::loss::{avg_downsample, mmsr_total_grad, nn_upsample, LossBreakdown, SCALE_FACTOR};
use crate::nn::{
    derive_seed, Bindings, Discriminator, DownGenerator, ModelBundle, Network, ParamSet, SrGenerator, UnitPair,
    Variant,
};
use crate::patch::ImagePatch;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::state::{IterationLog, OrigParts, TrainState};

/// Seed stream offset for per-epoch shuffles.
const SHUFFLE_STREAM: u64 = 1 << 40;

enum Generators {
    CycleGan { g1: SrGenerator, g2: DownGenerator },
    Unit(UnitPair),
}

pub struct Trainer {
    pub bundle: ModelBundle,
    pub state: TrainState,
    data: PatchSet,
    gens: Generators,
    dx: Discriminator,
    dy: Discriminator,
    order: Option<(usize, Vec<usize>, Vec<usize>)>,
}

struct GenOutcome {
    breakdown: LossBreakdown,
    parts: OrigParts,
    x_sr: Tensor,
    y_lr: Tensor,
    grads: Vec<Vec<Option<Tensor>>>,
}

fn iterations_per_epoch(config: &TrainConfig, data: &PatchSet) -> Result<u64> {
    let n = data.clinical.len().min(data.micro.len()) / config.batch_size;
    if n == 0 {
        return Err(Error::param(format!(
            "need at least {} patches per domain, have {} clinical and {} micro",
            config.batch_size,
            data.clinical.len(),
            data.micro.len()
        )));
    }
    Ok(n as u64)
}

fn check_data(config: &TrainConfig, data: &PatchSet) -> Result<()> {
    let ps = config.patch_sizes;
    let ok = data.clinical.iter().all(|p| p.patch.dims() == (ps.clinical, ps.clinical))
        && data.micro.iter().all(|p| p.patch.dims() == (ps.micro, ps.micro));
    if !ok {
        return Err(Error::shape(format!(
            "training patches must be {0}x{0} (clinical) and {1}x{1} (micro)",
            ps.clinical, ps.micro
        )));
    }
    Ok(())
}

fn param_grads(set: &ParamSet, b: &Bindings, g: &mut Gradients) -> Result<Vec<Option<Tensor>>> {
    set.iter().map(|(name, _)| Ok(g.take(b.get(name)?))).collect()
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::shape("empty batch"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = items.iter().map(|t| t.shape()[0]).sum();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = t.dims4()?;
    let len = c * h * w;
    (0..n)
        .map(|i| Tensor::from_vec(&[1, c, h, w], t.data()[i * len..(i + 1) * len].to_vec()))
        .collect()
}

fn check_finite_grads(groups: &[(&str, &ParamSet)], grads: &[Vec<Option<Tensor>>], iteration: u64) -> Result<()> {
    for ((tag, set), gs) in groups.iter().zip(grads) {
        for ((name, _), g) in set.iter().zip(gs) {
            if g.as_ref().is_some_and(|g| !g.all_finite()) {
                return Err(Error::NonFinite {
                    term: format!("gradient of {tag}/{name}"),
                    iteration,
                });
            }
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig, data: PatchSet) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.variant, config.model, config.seed)?;
        let ipe = iterations_per_epoch(&config, &data)?;
        Self::resume(bundle, TrainState::new(config, ipe), data)
    }

    /// Continues from a saved bundle and state.
    pub fn resume(bundle: ModelBundle, state: TrainState, data: PatchSet) -> Result<Self> {
        let config = &state.config;
        config.validate()?;
        bundle.validate()?;
        if bundle.variant != config.variant || bundle.specs != config.model {
            return Err(Error::Construction("bundle does not match the training config".into()));
        }
        check_data(config, &data)?;
        let ipe = iterations_per_epoch(config, &data)?;
        if ipe != state.iterations_per_epoch {
            return Err(Error::param(format!(
                "data yields {ipe} iterations per epoch, state expects {}",
                state.iterations_per_epoch
            )));
        }
        let gens = match bundle.variant {
            Variant::SrCycleGan => Generators::CycleGan {
                g1: bundle.sr_generator()?,
                g2: bundle.down_generator()?,
            },
            Variant::SrUnit => Generators::Unit(bundle.unit_pair()?),
        };
        Ok(Self {
            dx: bundle.disc_lr()?,
            dy: bundle.disc_hr()?,
            gens,
            bundle,
            state,
            data,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn data(&self) -> &PatchSet {
        &self.data
    }

    /// Swaps in a new patch set with the same number of iterations per epoch.
    pub fn set_data(&mut self, data: PatchSet) -> Result<()> {
        check_data(self.config(), &data)?;
        if iterations_per_epoch(self.config(), &data)? != self.state.iterations_per_epoch {
            return Err(Error::param("replacement data changes the epoch length"));
        }
        self.data = data;
        self.order = None;
        Ok(())
    }

    pub fn into_parts(self) -> (ModelBundle, TrainState) {
        (self.bundle, self.state)
    }

    fn batch(&mut self) -> (Vec<ImagePatch>, Vec<ImagePatch>) {
        let epoch = self.state.epoch;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config().seed, SHUFFLE_STREAM + epoch as u64));
            let mut c: Vec<usize> = (0..self.data.clinical.len()).collect();
            let mut m: Vec<usize> = (0..self.data.micro.len()).collect();
            c.shuffle(&mut rng);
            m.shuffle(&mut rng);
            self.order = Some((epoch, c, m));
        }
        let (_, c, m) = self.order.as_ref().expect("order set above");
        let bs = self.state.config.batch_size;
        let start = self.state.within_epoch() as usize * bs;
        let pick = |set: &[PatchSample], idx: &[usize]| -> Vec<ImagePatch> {
            idx[start..start + bs].iter().map(|&i| set[i].patch.clone()).collect()
        };
        (pick(&self.data.clinical, c), pick(&self.data.micro, m))
    }

    /// Runs one iteration and returns its log entry.
    pub fn step(&mut self) -> Result<IterationLog> {
        self.step_observed(|_| {})
    }

    /// Like [`Trainer::step`], calling `between` after the generator update
    /// and before the discriminator half-step.
    pub fn step_observed(&mut self, between: impl FnOnce(&ModelBundle)) -> Result<IterationLog> {
        if self.state.is_finished() {
            return Err(Error::param("training already reached its last epoch"));
        }
        let iteration = self.state.iteration;
        let (x, y) = self.batch();
        let lr = self.config().lr_at(self.state.epoch);

        let out = match &self.gens {
            Generators::CycleGan { .. } => self.cyclegan_generator_step(&x, &y)?,
            Generators::Unit(_) => self.unit_generator_step(&x, &y)?,
        };
        if let Some(term) = out.breakdown.first_non_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                iteration,
            });
        }
        {
            let b = &self.bundle;
            let mut groups: Vec<(&str, &ParamSet)> = vec![("g1", &b.g1), ("g2", &b.g2)];
            if let Some(l) = &b.unit_latent {
                groups.push(("unit_latent", l));
            }
            check_finite_grads(&groups, &out.grads, iteration)?;
        }
        let mut grads = out.grads.into_iter();
        let b = &mut self.bundle;
        let mut groups: Vec<(&str, &mut ParamSet, Vec<Option<Tensor>>)> = vec![
            ("g1", &mut b.g1, grads.next().unwrap_or_default()),
            ("g2", &mut b.g2, grads.next().unwrap_or_default()),
        ];
        if let Some(l) = b.unit_latent.as_mut() {
            groups.push(("unit_latent", l, grads.next().unwrap_or_default()));
        }
        self.state.g_optim.step(lr, &mut groups)?;
        between(&self.bundle);

        let (d_x_loss, d_y_loss) = self.discriminator_step(&x, &y, out.x_sr, out.y_lr, lr, iteration)?;

        let log = IterationLog {
            iteration,
            epoch: self.state.epoch,
            breakdown: out.breakdown,
            parts: out.parts,
            d_x_loss,
            d_y_loss,
        };
        self.state.loss_history.push(log);
        self.state.iteration += 1;
        if self.state.within_epoch() == self.state.iterations_per_epoch {
            self.state.epoch += 1;
        }
        Ok(log)
    }

    /// Adds the multi-modality terms to the tape as one external node.
    fn mmsr_node(
        &self,
        tape: &mut Tape,
        x: &[ImagePatch],
        y: &[ImagePatch],
        x_sr: Var,
        y_lr: Var,
    ) -> Result<(Var, [f64; 4])> {
        let cfg = self.config();
        for (term, v) in [("x_sr", x_sr), ("y_lr", y_lr)] {
            if !tape.value(v).all_finite() {
                return Err(Error::NonFinite {
                    term: term.into(),
                    iteration: self.state.iteration,
                });
            }
        }
        let sr = tape.value(x_sr).to_patches()?;
        let lr = tape.value(y_lr).to_patches()?;
        let n = x.len() as f64;
        let mut terms = [0.0; 4];
        let mut value = 0.0;
        let (mut g_sr, mut g_lr) = (Vec::new(), Vec::new());
        for i in 0..x.len() {
            let g = mmsr_total_grad(0.0, &x[i], &sr[i], &y[i], &lr[i], &cfg.weights, &cfg.ssim)?;
            let bd = g.breakdown;
            for (t, v) in terms.iter_mut().zip([bd.s_x, bd.s_y, bd.d_term, bd.u_term]) {
                *t += v / n;
            }
            value += bd.total / n;
            g_sr.push(g.x_sr.map(|v| v / n));
            g_lr.push(g.y_lr.map(|v| v / n));
        }
        let g_sr = Tensor::from_patches(&g_sr.iter().collect::<Vec<_>>())?;
        let g_lr = Tensor::from_patches(&g_lr.iter().collect::<Vec<_>>())?;
        Ok((tape.external(value, vec![(x_sr, g_sr), (y_lr, g_lr)])?, terms))
    }

    fn finish_generator(
        &self,
        tape: &mut Tape,
        weighted: Vec<(Var, f64)>,
        parts: OrigParts,
        mmsr: (Var, [f64; 4]),
        x_sr: Var,
        y_lr: Var,
        b: &Bindings,
    ) -> Result<GenOutcome> {
        let orig = tape.weighted_sum(&weighted);
        let orig_value = tape.scalar(orig);
        let (mmsr_var, [s_x, s_y, d_term, u_term]) = mmsr;
        let root = tape.weighted_sum(&[(orig, 1.0), (mmsr_var, 1.0)]);
        let breakdown = LossBreakdown::from_terms(orig_value, s_x, s_y, d_term, u_term, &self.config().weights);
        let mut g = tape.backward(root)?;
        let bundle = &self.bundle;
        let mut grads = vec![param_grads(&bundle.g1, b, &mut g)?, param_grads(&bundle.g2, b, &mut g)?];
        if let Some(l) = &bundle.unit_latent {
            grads.push(param_grads(l, b, &mut g)?);
        }
        Ok(GenOutcome {
            breakdown,
            parts,
            x_sr: tape.value(x_sr).clone(),
            y_lr: tape.value(y_lr).clone(),
            grads,
        })
    }

    fn cyclegan_generator_step(&self, x: &[ImagePatch], y: &[ImagePatch]) -> Result<GenOutcome> {
        let Generators::CycleGan { g1, g2 } = &self.gens else {
            unreachable!("called for the cycle-consistent variant only")
        };
        let w = self.config().weights;
        let bundle = &self.bundle;
        let mut tape = Tape::new();
        let mut b = Bindings::of(&mut tape, &[&bundle.g1, &bundle.g2], true);
        bundle.dx.bind(&mut tape, false, &mut b);
        bundle.dy.bind(&mut tape, false, &mut b);
        let xs = tape.constant(Tensor::from_patches(&x.iter().collect::<Vec<_>>())?);
        let ys = tape.constant(Tensor::from_patches(&y.iter().collect::<Vec<_>>())?);

        let x_sr = g1.forward(&mut tape, &b, xs)?;
        let y_lr = g2.forward(&mut tape, &b, ys)?;
        let mut parts = OrigParts::default();
        let mut weighted = Vec::new();
        if w.w_adv > 0.0 {
            let sy = self.dy.forward(&mut tape, &b, x_sr)?;
            let sx = self.dx.forward(&mut tape, &b, y_lr)?;
            let (ay, ax) = (tape.squared_to_const(sy, 1.0), tape.squared_to_const(sx, 1.0));
            parts.adversarial = tape.scalar(ay) + tape.scalar(ax);
            weighted.extend([(ay, w.w_adv), (ax, w.w_adv)]);
        }
        if w.w_cyc > 0.0 {
            let x_cyc = g2.forward(&mut tape, &b, x_sr)?;
            let y_cyc = g1.forward(&mut tape, &b, y_lr)?;
            let (cx, cy) = (tape.l1(x_cyc, xs)?, tape.l1(y_cyc, ys)?);
            parts.cycle = tape.scalar(cx) + tape.scalar(cy);
            weighted.extend([(cx, w.w_cyc), (cy, w.w_cyc)]);
        }
        if w.w_idt > 0.0 {
            // each generator should leave an image that already lives in its
            // output domain unchanged, after resampling it to the input size
            let y_small: Vec<ImagePatch> = y.iter().map(|p| avg_downsample(p, SCALE_FACTOR)).collect::<Result<_>>()?;
            let x_big: Vec<ImagePatch> = x.iter().map(|p| nn_upsample(p, SCALE_FACTOR)).collect::<Result<_>>()?;
            let ys_small = tape.constant(Tensor::from_patches(&y_small.iter().collect::<Vec<_>>())?);
            let xs_big = tape.constant(Tensor::from_patches(&x_big.iter().collect::<Vec<_>>())?);
            let iy = g1.forward(&mut tape, &b, ys_small)?;
            let ix = g2.forward(&mut tape, &b, xs_big)?;
            let (ly, lx) = (tape.l1(iy, ys)?, tape.l1(ix, xs)?);
            parts.identity = tape.scalar(ly) + tape.scalar(lx);
            weighted.extend([(ly, w.w_idt), (lx, w.w_idt)]);
        }
        let mmsr = self.mmsr_node(&mut tape, x, y, x_sr, y_lr)?;
        self.finish_generator(&mut tape, weighted, parts, mmsr, x_sr, y_lr, &b)
    }

    fn unit_generator_step(&mut self, x: &[ImagePatch], y: &[ImagePatch]) -> Result<GenOutcome> {
        let cfg = self.state.config.clone();
        let (w, uw) = (cfg.weights, cfg.unit);
        let Generators::Unit(pair) = &self.gens else {
            unreachable!("called for the shared-latent variant only")
        };
        let bundle = &self.bundle;
        let latent = bundle
            .unit_latent
            .as_ref()
            .ok_or_else(|| Error::Construction("sr-unit bundle without latent parameters".into()))?;
        let mut tape = Tape::new();
        let mut b = Bindings::of(&mut tape, &[&bundle.g1, &bundle.g2, latent], true);
        bundle.dx.bind(&mut tape, false, &mut b);
        bundle.dy.bind(&mut tape, false, &mut b);
        let xs = tape.constant(Tensor::from_patches(&x.iter().collect::<Vec<_>>())?);
        let ys = tape.constant(Tensor::from_patches(&y.iter().collect::<Vec<_>>())?);

        let rng = &mut self.state.rng;
        let noise = Normal::new(0.0f32, uw.latent_noise as f32).map_err(|e| Error::param(e.to_string()))?;
        let mut noisy = |tape: &mut Tape, mu: Var| -> Result<Var> {
            if uw.latent_noise == 0.0 {
                return Ok(mu);
            }
            let shape = tape.value(mu).shape().to_vec();
            let n = tape.value(mu).numel();
            let eps = Tensor::from_vec(&shape, (0..n).map(|_| noise.sample(rng)).collect())?;
            let eps = tape.constant(eps);
            tape.add(mu, eps)
        };

        let mu_x = pair.encode_lr(&mut tape, &b, xs)?;
        let mu_y = pair.encode_hr(&mut tape, &b, ys)?;
        if tape.value(mu_x).shape() != tape.value(mu_y).shape() {
            return Err(Error::shape(format!(
                "latent shapes differ: {:?} vs {:?}",
                tape.value(mu_x).shape(),
                tape.value(mu_y).shape()
            )));
        }
        let z_x = noisy(&mut tape, mu_x)?;
        let z_y = noisy(&mut tape, mu_y)?;
        let x_rec = pair.decode_lr(&mut tape, &b, z_x)?;
        let y_rec = pair.decode_hr(&mut tape, &b, z_y)?;
        let x_sr = pair.decode_hr(&mut tape, &b, z_x)?;
        let y_lr = pair.decode_lr(&mut tape, &b, z_y)?;

        let mut parts = OrigParts::default();
        let mut weighted = Vec::new();
        let (rx, ry) = (tape.l1(x_rec, xs)?, tape.l1(y_rec, ys)?);
        parts.reconstruction = tape.scalar(rx) + tape.scalar(ry);
        weighted.extend([(rx, uw.recon), (ry, uw.recon)]);
        let (kx, ky) = (tape.squared_to_const(mu_x, 0.0), tape.squared_to_const(mu_y, 0.0));
        parts.latent = tape.scalar(kx) + tape.scalar(ky);
        weighted.extend([(kx, uw.kl), (ky, uw.kl)]);
        if w.w_adv > 0.0 {
            let sy = self.dy.forward(&mut tape, &b, x_sr)?;
            let sx = self.dx.forward(&mut tape, &b, y_lr)?;
            let (ay, ax) = (tape.squared_to_const(sy, 1.0), tape.squared_to_const(sx, 1.0));
            parts.adversarial = tape.scalar(ay) + tape.scalar(ax);
            weighted.extend([(ay, w.w_adv), (ax, w.w_adv)]);
        }
        if w.w_cyc > 0.0 || uw.cycle_kl > 0.0 {
            let mu_xc = pair.encode_hr(&mut tape, &b, x_sr)?;
            let mu_yc = pair.encode_lr(&mut tape, &b, y_lr)?;
            let z_xc = noisy(&mut tape, mu_xc)?;
            let z_yc = noisy(&mut tape, mu_yc)?;
            let x_cyc = pair.decode_lr(&mut tape, &b, z_xc)?;
            let y_cyc = pair.decode_hr(&mut tape, &b, z_yc)?;
            let (cx, cy) = (tape.l1(x_cyc, xs)?, tape.l1(y_cyc, ys)?);
            parts.cycle = tape.scalar(cx) + tape.scalar(cy);
            weighted.extend([(cx, w.w_cyc), (cy, w.w_cyc)]);
            let (kxc, kyc) = (tape.squared_to_const(mu_xc, 0.0), tape.squared_to_const(mu_yc, 0.0));
            parts.latent += tape.scalar(kxc) + tape.scalar(kyc);
            weighted.extend([(kxc, uw.cycle_kl), (kyc, uw.cycle_kl)]);
        }
        let mmsr = self.mmsr_node(&mut tape, x, y, x_sr, y_lr)?;
        self.finish_generator(&mut tape, weighted, parts, mmsr, x_sr, y_lr, &b)
    }

    fn discriminator_step(
        &mut self,
        x: &[ImagePatch],
        y: &[ImagePatch],
        x_sr: Tensor,
        y_lr: Tensor,
        lr: f64,
        iteration: u64,
    ) -> Result<(f64, f64)> {
        let st = &mut self.state;
        let fake_y = unstack(&x_sr)?
            .into_iter()
            .map(|t| st.pool_y.query(t, &mut st.rng))
            .collect::<Vec<_>>();
        let fake_x = unstack(&y_lr)?
            .into_iter()
            .map(|t| st.pool_x.query(t, &mut st.rng))
            .collect::<Vec<_>>();

        let bundle = &self.bundle;
        let mut tape = Tape::new();
        let b = Bindings::of(&mut tape, &[&bundle.dx, &bundle.dy], true);
        let real_x = tape.constant(Tensor::from_patches(&x.iter().collect::<Vec<_>>())?);
        let real_y = tape.constant(Tensor::from_patches(&y.iter().collect::<Vec<_>>())?);
        let fake_x = tape.constant(stack(&fake_x)?);
        let fake_y = tape.constant(stack(&fake_y)?);

        let half = |tape: &mut Tape, d: &Discriminator, real: Var, fake: Var| -> Result<Var> {
            let sr = d.forward(tape, &b, real)?;
            let sf = d.forward(tape, &b, fake)?;
            let (lr_, lf) = (tape.squared_to_const(sr, 1.0), tape.squared_to_const(sf, 0.0));
            Ok(tape.weighted_sum(&[(lr_, 0.5), (lf, 0.5)]))
        };
        let dx_loss = half(&mut tape, &self.dx, real_x, fake_x)?;
        let dy_loss = half(&mut tape, &self.dy, real_y, fake_y)?;
        let (vx, vy) = (tape.scalar(dx_loss), tape.scalar(dy_loss));
        for (term, v) in [("d_x_loss", vx), ("d_y_loss", vy)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: term.into(),
                    iteration,
                });
            }
        }
        let root = tape.weighted_sum(&[(dx_loss, 1.0), (dy_loss, 1.0)]);
        let mut g = tape.backward(root)?;
        let grads = vec![param_grads(&bundle.dx, &b, &mut g)?, param_grads(&bundle.dy, &b, &mut g)?];
        check_finite_grads(&[("dx", &bundle.dx), ("dy", &bundle.dy)], &grads, iteration)?;
        let mut grads = grads.into_iter();
        let bundle = &mut self.bundle;
        self.state.d_optim.step(
            lr,
            &mut [
                ("dx", &mut bundle.dx, grads.next().unwrap_or_default()),
                ("dy", &mut bundle.dy, grads.next().unwrap_or_default()),
            ],
        )?;
        Ok((vx, vy))
    }

    /// Runs up to `max_iterations` more iterations (all remaining epochs when
    /// `None`). `on_epoch` is called after every completed epoch.
    pub fn run(
        &mut self,
        max_iterations: Option<u64>,
        mut on_epoch: impl FnMut(&mut Trainer) -> Result<()>,
    ) -> Result<()> {
        let mut done = 0;
        while !self.state.is_finished() && max_iterations.is_none_or(|m| done < m) {
            let epoch = self.state.epoch;
            self.step()?;
            done += 1;
            if self.state.epoch != epoch {
                on_epoch(self)?;
            }
        }
        Ok(())
    }
}
