use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset, Model};
use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{rotation_from_axis_angle, sample_camera, RelativeTransform};
use crate::losses::{adversarial_losses, compactness_loss, f_logistic_var, geometric_consistency_term, r1_penalty_var, LossReport};
use crate::networks::{Bound, ParamSet};
use crate::{Error, Real, Result};

pub(crate) const DSTEP_STREAM: u64 = 1;
pub(crate) const GSTEP_STREAM: u64 = 2;

/// One training image and its condition flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// 1 for a full scene, 0 for an empty background.
    pub c: Real,
}

/// Outcome of one [`train_step`]; serialized as one log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the step, counting from 0.
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    /// True when a non-finite loss rolled the step back.
    pub aborted: bool,
    /// Tensors whose update was skipped for a non-finite gradient.
    pub skipped_tensors: usize,
}

fn grads_of(tape: &Tape, loss: Var<'_>, p: &Bound<'_>) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(p.vars().iter().map(|&v| g.get_or_zeros(v)).collect())
}

/// Elementwise sum of per-sample gradients, in sample order so the result
/// does not depend on the number of threads.
fn reduce(mut per_sample: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let mut iter = per_sample.drain(..);
    let mut total = iter.next().unwrap_or_default();
    for grads in iter {
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    total
}

fn binds_const<'t>(tape: &'t Tape, params: &ParamSet) -> Bound<'t> {
    params.bind(tape, false)
}

fn latent(rng: &mut impl Rng, dim: usize) -> Tensor {
    Tensor::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Condition flag of sample `i` of a batch: the first `composites` samples are full scenes.
fn flag(i: usize, composites: usize) -> Real {
    if i < composites {
        1.0
    } else {
        0.0
    }
}

struct DiscSample {
    adv: Real,
    r1: Real,
    grads: Vec<Tensor>,
}

/// Discriminator losses and the gradient of `mean(L_D + R1)`. The fake
/// images use the same flags as the real batch.
pub fn discriminator_gradients(model: &Model, batch: &[ImageRecord]) -> Result<(Real, Real, Vec<Tensor>)> {
    let cfg = &model.config;
    let b = batch.len() as Real;
    let samples = batch
        .par_iter()
        .enumerate()
        .map(|(i, rec)| -> Result<DiscSample> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[DSTEP_STREAM, model.step, i as u64]));
            let z = latent(&mut rng, cfg.network.latent_dim);
            let camera = sample_camera(&mut rng, &cfg.camera);
            let tape = Tape::new();
            let gp = binds_const(&tape, &model.generator);
            let attrs = model.decode(&gp, tape.constant(z))?;
            let fake = model.render(&gp, attrs, &camera, rec.c > 0.5)?.composite.image;
            let dp = model.discriminator.bind(&tape, true);
            let sw = model.disc.spectral_weights(&dp)?;
            let d_fake = model.disc.forward(&dp, &sw, fake, rec.c)?;
            let d_real = model.disc.forward(&dp, &sw, tape.constant(rec.image.clone()), rec.c)?;
            let (_, adv) = adversarial_losses(&[d_fake], &[d_real])?;
            let r1 = r1_penalty_var(&model.disc, &dp, &sw, &[(rec.image.clone(), rec.c)], cfg.losses.gamma_r1)?;
            let loss = (adv + r1).scale(1.0 / b);
            Ok(DiscSample {
                adv: adv.item(),
                r1: r1.item(),
                grads: grads_of(&tape, loss, &dp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let adv = samples.iter().map(|s| s.adv).sum::<Real>() / b;
    let r1 = samples.iter().map(|s| s.r1).sum::<Real>() / b;
    Ok((adv, r1, reduce(samples.into_iter().map(|s| s.grads).collect())))
}

struct GenSample {
    adv: Real,
    com: Real,
    geo: Real,
    com_terms: Vec<Real>,
    grads: Vec<Tensor>,
}

/// Generator losses of a fresh batch and the gradient of
/// `mean L_G + (λ_com·L_com + λ_geo·L_geo)` with the regularizers averaged
/// over the full-scene samples.
pub struct GeneratorStep {
    pub adv: Real,
    pub com: Real,
    pub geo: Real,
    pub com_terms: Vec<Real>,
    pub grads: Vec<Tensor>,
}

pub fn generator_gradients(model: &Model) -> Result<GeneratorStep> {
    let cfg = &model.config;
    let lc = &cfg.losses;
    let batch = cfg.batch_size;
    let composites = cfg.composites_per_batch();
    let objects = cfg.num_objects;
    let perturb = lc.sigma_t > 0.0 || lc.sigma_r_deg > 0.0;
    let samples = (0..batch)
        .into_par_iter()
        .map(|i| -> Result<GenSample> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[GSTEP_STREAM, model.step, i as u64]));
            let z = latent(&mut rng, cfg.network.latent_dim);
            let camera = sample_camera(&mut rng, &cfg.camera);
            let c = flag(i, composites);
            let tape = Tape::new();
            let gp = model.generator.bind(&tape, true);
            let dp = binds_const(&tape, &model.discriminator);
            let sw = model.disc.spectral_weights(&dp)?;
            let attrs = model.decode(&gp, tape.constant(z))?;
            let g = model.render(&gp, attrs.clone(), &camera, c > 0.5)?;
            let d_fake = model.disc.forward(&dp, &sw, g.composite.image, c)?;
            let adv = -f_logistic_var(d_fake).sum();
            let mut loss = adv.scale(1.0 / batch as Real);
            let (mut com, mut geo, mut com_terms) = (0.0, 0.0, vec![]);
            if c > 0.5 {
                let coarse: Vec<Var> = g.triplets[..objects].iter().map(|t| t.expect("rendered").alpha).collect();
                let (com_v, terms) = compactness_loss(&coarse, lc.tau)?;
                let mut geo_v = tape.scalar(0.0);
                if perturb {
                    let rot = Normal::new(0.0, lc.sigma_r_deg.to_radians()).map_err(|e| Error::Config(e.to_string()))?;
                    let shift = Normal::new(0.0, lc.sigma_t).map_err(|e| Error::Config(e.to_string()))?;
                    for (j, attr) in attrs[..objects].iter().enumerate() {
                        let angle: Real = rng.sample(rot);
                        let dt = [rng.sample(shift), rng.sample(shift), rng.sample(shift)];
                        let dr = rotation_from_axis_angle([0.0, 0.0, angle]);
                        let moved = attr.perturbed(&dr, &dt)?;
                        let (_, refined) = model.refine(&gp, &moved, &camera)?;
                        let centre = attr.pose().translation;
                        let transform = RelativeTransform::about_center(dr, centre, dt);
                        let original = g.refined[j].expect("rendered");
                        geo_v = geo_v + geometric_consistency_term(&original, &refined, &camera, &transform, lc.occlusion())?;
                    }
                }
                let reg = com_v.scale(lc.lambda_com) + geo_v.scale(lc.lambda_geo);
                loss = loss + reg.scale(1.0 / composites as Real);
                com = com_v.item();
                geo = geo_v.item();
                com_terms = terms;
            }
            Ok(GenSample {
                adv: adv.item(),
                com,
                geo,
                com_terms,
                grads: grads_of(&tape, loss, &gp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_composite = |x: Real| if composites > 0 { x / composites as Real } else { 0.0 };
    let mut com_terms = vec![0.0; objects];
    for s in &samples {
        for (acc, t) in com_terms.iter_mut().zip(&s.com_terms) {
            *acc += t;
        }
    }
    Ok(GeneratorStep {
        adv: samples.iter().map(|s| s.adv).sum::<Real>() / batch as Real,
        com: per_composite(samples.iter().map(|s| s.com).sum()),
        geo: per_composite(samples.iter().map(|s| s.geo).sum()),
        com_terms: com_terms.into_iter().map(per_composite).collect(),
        grads: reduce(samples.into_iter().map(|s| s.grads).collect()),
    })
}

/// Maps non-finite failures inside the pipeline to `None` so the step can
/// be rolled back; other errors propagate.
fn finite_or_abort<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One discriminator update followed by one generator update.
///
/// A non-finite loss restores the weights, optimizer state and
/// power-iteration vectors from before the step and marks it aborted. The
/// step counter advances either way.
pub fn train_step(model: &mut Model, batch: &[ImageRecord]) -> Result<StepRecord> {
    let cfg = model.config.clone();
    if batch.len() != cfg.batch_size {
        return Err(Error::Invalid(format!("batch has {} images, config says {}", batch.len(), cfg.batch_size)));
    }
    let composites = cfg.composites_per_batch();
    for (i, rec) in batch.iter().enumerate() {
        if rec.c != flag(i, composites) {
            return Err(Error::Invalid(format!("batch record {i} has c = {}, expected {}", rec.c, flag(i, composites))));
        }
    }
    let saved = (model.discriminator.clone(), model.opt_d.clone(), model.disc.u.clone());
    let step = model.step;
    let mut record = StepRecord {
        step,
        report: LossReport::default(),
        aborted: false,
        skipped_tensors: 0,
    };
    model.disc.update_spectral_state(&model.discriminator);
    let d = finite_or_abort(discriminator_gradients(model, batch))?.filter(|(a, r, _)| a.is_finite() && r.is_finite());
    let g = match d {
        Some((adv_d, r1, grads)) => {
            record.report.adv_d = adv_d;
            record.report.r1 = r1;
            record.report.total_d = adv_d + r1;
            record.skipped_tensors += model.opt_d.step(model.discriminator.values_mut(), &grads)?;
            finite_or_abort(generator_gradients(model))?
        }
        None => None,
    };
    match g {
        Some(gs) if [gs.adv, gs.com, gs.geo].iter().all(|v| v.is_finite()) => {
            let lc = &cfg.losses;
            record.report.adv_g = gs.adv;
            record.report.com = gs.com;
            record.report.geo = gs.geo;
            record.report.com_terms = gs.com_terms;
            record.report.total_g = gs.adv + lc.lambda_com * gs.com + lc.lambda_geo * gs.geo;
            record.skipped_tensors += model.opt_g.step(model.generator.values_mut(), &gs.grads)?;
        }
        _ => {
            (model.discriminator, model.opt_d, model.disc.u) = saved;
            record.aborted = true;
        }
    }
    model.step += 1;
    Ok(record)
}

/// Paths written by [`train`] inside its output directory.
pub struct RunFiles {
    pub log: PathBuf,
    pub timing: PathBuf,
    pub latest: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        Self {
            log: dir.join("log.jsonl"),
            timing: dir.join("timing.jsonl"),
            latest: dir.join("latest.ckpt"),
        }
    }

    pub fn checkpoint(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step_{step:06}.ckpt"))
    }
}

/// Keeps the first `lines` lines of a log, so a resumed run continues
/// exactly where its checkpoint left off.
fn truncate_lines(path: &Path, lines: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = BufReader::new(File::open(path)?).lines().take(lines as usize).collect::<std::io::Result<_>>()?;
    let mut f = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    step: u64,
    seconds: f64,
}

/// Runs training until `model.step == config.steps`, writing the step log,
/// wall-clock timings and checkpoints into `dir`. A model restored from a
/// checkpoint resumes where it stopped.
pub fn train(model: &mut Model, data: &Dataset, dir: &Path, mut progress: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    data.check_compatible(&model.config)?;
    std::fs::create_dir_all(dir)?;
    let files = RunFiles::new(dir);
    truncate_lines(&files.log, model.step)?;
    truncate_lines(&files.timing, model.step)?;
    let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
    let mut log = open(&files.log)?;
    let mut timing = open(&files.timing)?;
    let mut records = Vec::new();
    while model.step < model.config.steps {
        let start = Instant::now();
        let batch = data.sample_batch(&model.config, model.step)?;
        let rec = train_step(model, &batch)?;
        writeln!(log, "{}", serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?)?;
        let t = Timing {
            step: rec.step,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(timing, "{}", serde_json::to_string(&t).map_err(|e| Error::Invalid(e.to_string()))?)?;
        progress(&rec);
        records.push(rec);
        let every = model.config.checkpoint_every;
        if (every > 0 && model.step % every == 0) || model.step == model.config.steps {
            let ckpt = model.to_checkpoint();
            ckpt.save(&RunFiles::checkpoint(dir, model.step))?;
            ckpt.save(&files.latest)?;
        }
    }
    Ok(records)
}
