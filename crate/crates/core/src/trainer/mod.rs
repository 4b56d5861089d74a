//! Denoiser training: random-timestep corruption, loss, backward, Adam.
//!
//! Randomness is keyed by position so runs can stop and resume anywhere:
//! step `s` draws its timesteps and noise from stream `s` of the seed, the
//! shuffle of epoch `e` from stream `SHUFFLE_STREAM + e`, and held-out
//! evaluation from the fixed `eval_seed`.

mod adam;
mod data;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{condition_tensor, phantom_samples, ConditionMode, Sample};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::diffusion::{corrupt, estimate_x0, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    graph_estimate_x0, graph_image_loss, graph_noise_loss, graph_suvr_constraint, LossReport,
};
use crate::metrics::{psnr_values, ssim3d_values, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::model::checkpoint::{self, Checkpoint, Section};
use crate::model::{forward, UNet};
use crate::rng::{normal_tensor, stream_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::volume::Dims3;

const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossMode {
    /// noise loss plus the image-level ℓ1
    #[default]
    Ficd,
    /// noise loss only; the image term is still reported
    NoiseOnly,
    /// noise loss plus global and CTX-masked SUVr ℓ1
    FicdS,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ficd => "ficd",
            LossMode::NoiseOnly => "ddpm",
            LossMode::FicdS => "ficd-s",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ficd" => Ok(LossMode::Ficd),
            "ddpm" | "noise_only" | "noise-only" => Ok(LossMode::NoiseOnly),
            "ficd-s" | "ficd_s" => Ok(LossMode::FicdS),
            _ => Err(Error::Config(format!(
                "unknown loss mode `{s}` (ficd, ddpm, ficd-s)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// curve row every this many steps (and one at the end)
    pub log_every: usize,
    /// stop early after this many optimizer steps
    pub max_steps: Option<usize>,
    pub eval_seed: u64,
    /// timestep draws per held-out pair
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            adam: AdamConfig::default(),
            loss_mode: LossMode::Ficd,
            seed: 0,
            log_every: 50,
            max_steps: None,
            eval_seed: 7,
            eval_draws: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.eval_draws == 0 {
            return Err(Error::Config(
                "batch_size, log_every and eval_draws must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.adam.lr
            )));
        }
        if !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || self.adam.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss report and parameter gradients for one sample at a given `(t, ε)`.
pub fn sample_gradients(
    net: &UNet,
    sample: &Sample,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    mode: LossMode,
) -> Result<(LossReport, Vec<Tensor>)> {
    let x_t = corrupt(&sample.target, eps, t, sched)?;
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let xv = g.constant(x_t);
    let cv = g.constant(sample.condition.clone());
    let ev = g.constant(eps.clone());
    let x0 = g.constant(sample.target.clone());
    let eps_hat = forward(&net.spec, &mut g, &p, xv, cv, &[t])?;
    let l_noise = graph_noise_loss(&mut g, ev, eps_hat)?;
    let x0_hat = graph_estimate_x0(&mut g, xv, eps_hat, t, sched)?;
    let l_image = graph_image_loss(&mut g, x0, x0_hat)?;
    let mut report = LossReport {
        l_noise: g.value(l_noise).data()[0],
        l_image: g.value(l_image).data()[0],
        ..Default::default()
    };
    let objective = match mode {
        LossMode::Ficd => g.add(l_noise, l_image)?,
        LossMode::NoiseOnly => l_noise,
        LossMode::FicdS => {
            let ctx = sample
                .ctx
                .as_ref()
                .ok_or_else(|| invalid("ficd-s training needs a CTX mask per sample"))?;
            let (global, masked) = graph_suvr_constraint(&mut g, x0, x0_hat, ctx)?;
            report.l_suvr = Some((g.value(global).data()[0], g.value(masked).data()[0]));
            let s = g.add(l_noise, global)?;
            g.add(s, masked)?
        }
    };
    report.l_total = g.value(objective).data()[0];
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at t={t}")));
    }
    let grads = g.backward(objective)?;
    Ok((report, p.vars().iter().map(|&v| grads.get(v)).collect()))
}

/// One optimizer step over `batch`; per sample, `t` is uniform on `[1, T]`
/// and then ε is drawn, both from `rng`. Gradients are averaged.
pub fn train_step(
    net: &mut UNet,
    adam: &mut AdamState,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut reports = Vec::with_capacity(batch.len());
    let mut total: Option<Vec<Tensor>> = None;
    for (i, s) in batch.iter().enumerate() {
        let t = rng.random_range(1..=sched.steps());
        let eps = normal_tensor(rng, s.target.shape());
        let (report, grads) = sample_gradients(net, s, t, &eps, sched, cfg.loss_mode)
            .map_err(|e| Error::Numeric(format!("batch index {i}, t={t}: {e}")))?;
        reports.push(report);
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads: Vec<Tensor> = total
        .unwrap()
        .into_iter()
        .map(|g| g.map(|v| v * scale))
        .collect();
    adam_step(&mut net.params, &grads, adam, &cfg.adam)?;
    Ok(LossReport::mean(&reports))
}

/// Quality of the one-shot estimate x̃0 on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// mean |x0 − x̃0| in train range
    pub l1: f64,
    /// mean PSNR of clamped x̃0 in eval range, over pairs that are not identical
    pub psnr: f64,
    /// mean SSIM in eval range; NaN when the volume is smaller than the window
    pub ssim: f64,
}

/// Each pair is corrupted at `draws` fixed `(t, ε)` draws from
/// `stream_rng(eval_seed, i)`.
pub fn evaluate_x0(
    net: &dyn Denoiser,
    samples: &[Sample],
    sched: &NoiseSchedule,
    eval_seed: u64,
    draws: usize,
) -> Result<EvalReport> {
    let (mut l1, mut psnr, mut ssim) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream_rng(eval_seed, i as u64);
        for _ in 0..draws {
            let t = rng.random_range(1..=sched.steps());
            let eps = normal_tensor(&mut rng, s.target.shape());
            let x_t = corrupt(&s.target, &eps, t, sched)?;
            let eps_hat = net.predict_noise(&x_t, &s.condition, t)?;
            let x0_hat = estimate_x0(&x_t, &eps_hat, t, sched, false)?;
            l1.push(crate::losses::image_loss(&s.target, &x0_hat)?);
            let to_eval = |v: &f64| (v.clamp(-1.0, 1.0) + 1.0) * 0.5;
            let a: Vec<f64> = x0_hat.data().iter().map(to_eval).collect();
            let b: Vec<f64> = s.target.data().iter().map(to_eval).collect();
            if let Some(p) = psnr_values(&a, &b)?.finite() {
                psnr.push(p);
            }
            let sh = s.target.shape();
            if sh.len() == 5
                && sh[0] == 1
                && sh[1] == 1
                && sh[2..].iter().all(|&n| n >= SSIM_WINDOW)
            {
                let d = Dims3::new(sh[4], sh[3], sh[2]);
                ssim.push(ssim3d_values(d, &a, &b, SSIM_WINDOW, SSIM_K1, SSIM_K2)?);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalReport {
        l1: mean(&l1),
        psnr: mean(&psnr),
        ssim: mean(&ssim),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: LossReport,
    pub eval: EvalReport,
}

pub const CURVE_HEADER: &str = "step,l_noise,l_image,l_total,psnr,ssim,l1";

/// Loss curves as CSV, shortest round-trip float formatting.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.loss.l_noise,
            r.loss.l_image,
            r.loss.l_total,
            r.eval.psnr,
            r.eval.ssim,
            r.eval.l1
        ));
    }
    out
}

/// Owns the network, optimizer state and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: UNet,
    pub adam: AdamState,
    pub step: usize,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(net: UNet, sched: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&net.params);
        Ok(Trainer {
            net,
            adam,
            step: 0,
            sched,
            cfg,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let all = self.cfg.epochs * self.steps_per_epoch(n);
        self.cfg.max_steps.map_or(all, |m| m.min(all))
    }

    /// Sample indices of the batch used at `step`.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(
            self.cfg.seed,
            SHUFFLE_STREAM + epoch as u64,
        ));
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(n)].to_vec()
    }

    /// Runs the next optimizer step.
    pub fn step_once(&mut self, data: &[Sample]) -> Result<LossReport> {
        let batch: Vec<&Sample> = self
            .batch_indices(data.len(), self.step)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let mut rng = stream_rng(self.cfg.seed, self.step as u64);
        let report = train_step(
            &mut self.net,
            &mut self.adam,
            &batch,
            &mut rng,
            &self.sched,
            &self.cfg,
        )
        .map_err(|e| Error::Numeric(format!("step {}: {e}", self.step)))?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until the configured step budget. A curve row (mean losses
    /// since the previous row plus held-out evaluation) is produced every
    /// `log_every` steps and at the last step. With `checkpoint_path`, state
    /// is saved at every epoch end and at the last step.
    pub fn run(
        &mut self,
        data: &[Sample],
        heldout: &[Sample],
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<CurveRow>> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let total = self.total_steps(data.len());
        let spe = self.steps_per_epoch(data.len());
        let eval_set = if heldout.is_empty() { data } else { heldout };
        let mut rows = Vec::new();
        let mut pending = Vec::new();
        while self.step < total {
            pending.push(self.step_once(data)?);
            let done = self.step == total;
            if self.step % self.cfg.log_every == 0 || done {
                let eval = evaluate_x0(
                    &self.net,
                    eval_set,
                    &self.sched,
                    self.cfg.eval_seed,
                    self.cfg.eval_draws,
                )?;
                rows.push(CurveRow {
                    step: self.step,
                    loss: LossReport::mean(&pending),
                    eval,
                });
                pending.clear();
            }
            if let Some(path) = checkpoint_path {
                if self.step % spe == 0 || done {
                    self.to_checkpoint().save(path)?;
                }
            }
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Section::Denoiser);
        checkpoint::write_spec(&mut c, &self.net.spec);
        checkpoint::write_schedule(&mut c, &self.sched);
        c.set("train.step", self.step);
        c.set("train.seed", self.cfg.seed);
        c.set("train.loss_mode", self.cfg.loss_mode);
        c.set("adam.step", self.adam.step);
        c.push_params("", &self.net.params);
        for (prefix, bufs) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, _), t) in self.net.params.iter().zip(bufs) {
                c.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        c
    }

    /// Restores a run; `cfg` supplies the settings not stored in the file.
    pub fn from_checkpoint(c: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let spec = checkpoint::read_spec(c)?;
        let sched = checkpoint::read_schedule(c)?;
        let all = c.params("")?;
        let params = crate::model::Params::from_entries(
            all.iter()
                .filter(|(n, _)| !n.starts_with("adam."))
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        )?;
        let net = UNet::from_params(spec, params)?;
        let mut trainer = Trainer::new(net, sched, cfg)?;
        let (m, v) = (c.params("adam.m.")?, c.params("adam.v.")?);
        if m.len() == trainer.net.params.len() && v.len() == trainer.net.params.len() {
            for (i, name) in trainer.net.params.names().enumerate() {
                trainer.adam.m[i] = m
                    .get(name)
                    .cloned()
                    .ok_or_else(|| invalid(format!("missing adam.m.{name}")))?;
                trainer.adam.v[i] = v
                    .get(name)
                    .cloned()
                    .ok_or_else(|| invalid(format!("missing adam.v.{name}")))?;
            }
            trainer.adam.step = c.parse("adam.step")?;
        }
        trainer.step = c.parse("train.step")?;
        Ok(trainer)
    }
}
