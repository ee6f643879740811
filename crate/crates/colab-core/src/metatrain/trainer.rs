//! The training engine: one loop shared by every arm, differing only in
//! where the context labels come from. The learned arm adds a generator
//! refresh on a fixed schedule.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contextgen::{dilated_mask_context, kmeans_context, oracle_context, ContextArm};
use crate::error::{Error, Result};
use crate::geometry::{Mask, SoftMask};
use crate::io::{fmt_sig, read_tensor, write_tensor};
use crate::labeling::LabelField;
use crate::losses::{roi_loss, seg_loss};
use crate::metatrain::bilevel::{hypergradient, inner_step, BilevelProblem, EpsRule};
use crate::metatrain::targets::{
    case_soft_mask, logits_to_q, plain_binary_field, roi_batch, soft_mask_batch, stack_fields,
    target_batch, target_graph, PatchView,
};
use crate::metatrain::ColabConfig;
use crate::metrics::{evaluate_case, predict_case, MetricsRecord};
use crate::ndtensor::{sgd_step, GradMap, Graph, NetworkParams, Tensor};
use crate::nets::{build_net, NetConfig, SegNetwork};
use crate::rng::{derive_seed, RngState, SeedStream};
use crate::synthdata::{Case, Patch, PatchSampler};

const DIVERGENCE_FACTOR: f64 = 1e3;
const MASS_COLLAPSE: f64 = 0.98;

/// Per-epoch aggregate row of the metrics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dsc: f64,
    pub sen: f64,
    pub prc: f64,
    pub hd95: f64,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub loss_roi: f64,
}

/// Everything a run mutates, and nothing else: restoring this struct and
/// replaying the remaining iterations reproduces the uninterrupted
/// trajectory exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: ColabConfig,
    pub arm: ContextArm,
    /// Completed iterations.
    pub iteration: usize,
    pub seg: SegNetwork,
    pub seg_vel: NetworkParams,
    pub gen: Option<SegNetwork>,
    pub gen_vel: NetworkParams,
    pub batch_rng: SeedStream,
    /// Loss of the very first iteration, the divergence reference.
    pub init_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Where context labels come from during the segmenter update.
pub enum ContextProvider {
    /// No context: plain two-channel foreground/background targets.
    Plain,
    /// One fixed full-image label field per training case.
    Static(Vec<LabelField>),
    /// The generator carried in TrainState labels cases on demand.
    Generator,
}

pub struct TrainData<'a> {
    pub train: &'a [Case],
    pub test: &'a [Case],
}

#[derive(Default)]
pub struct TrainOptions {
    /// Checkpoint directory and metrics table live here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs even if the config asks for more.
    pub max_epochs: Option<usize>,
}

pub struct TrainOutput {
    pub state: TrainState,
    /// Per-case test metrics at the final reached epoch.
    pub test_records: Vec<MetricsRecord>,
    /// Sampled windows per iteration, for pairing checks across arms.
    pub batch_log: Vec<Vec<Patch>>,
}

fn strip_scope(grads: GradMap, prefix: &str) -> GradMap {
    grads
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v)))
        .collect()
}

/// Couples the generator to the segmenter objective on one fixed batch of
/// patches; the probe passes of the outer-gradient estimate all run here.
pub struct NetworkBilevel<'a> {
    pub seg: &'a SegNetwork,
    pub gen: &'a SegNetwork,
    /// [N, 1, P, P] patch images.
    pub images: &'a Tensor,
    /// [N, 1, P, P] foreground indicators.
    pub roi: &'a Tensor,
    /// [N, 1, P, P] soft masks, zeroed for empty-source patches.
    pub soft: &'a Tensor,
}

impl NetworkBilevel<'_> {
    fn coupled_loss(
        &self,
        theta: &NetworkParams,
        omega: &NetworkParams,
        train_seg: bool,
    ) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let img = g.leaf(self.images.clone());
        let gen = SegNetwork::from_params(self.gen.cfg().clone(), "gen", omega.clone_params())?;
        let gen_ids = gen.register_params(&mut g, !train_seg)?;
        let glog = gen.forward_with(&mut g, img, &gen_ids)?;
        let rn = g.leaf(self.roi.clone());
        let sn = g.leaf(self.soft.clone());
        let tgt = target_graph(&mut g, glog, rn, sn)?;

        let seg = SegNetwork::from_params(self.seg.cfg().clone(), "seg", theta.clone_params())?;
        let seg_ids = seg.register_params(&mut g, train_seg)?;
        let slog = seg.forward_with(&mut g, img, &seg_ids)?;
        let loss = seg_loss(&mut g, slog, tgt)?;
        let grads = g.backward(loss.node)?;
        let scope = if train_seg { "seg." } else { "gen." };
        Ok((loss.total(&g), strip_scope(grads, scope)))
    }
}

impl BilevelProblem for NetworkBilevel<'_> {
    fn seg_loss_grad_theta(
        &self,
        theta: &NetworkParams,
        omega: &NetworkParams,
    ) -> Result<(f64, GradMap)> {
        self.coupled_loss(theta, omega, true)
    }

    fn seg_loss_grad_omega(
        &self,
        theta: &NetworkParams,
        omega: &NetworkParams,
    ) -> Result<(f64, GradMap)> {
        self.coupled_loss(theta, omega, false)
    }

    fn roi_loss_grad_theta(&self, theta: &NetworkParams) -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let img = g.leaf(self.images.clone());
        let seg = SegNetwork::from_params(self.seg.cfg().clone(), "seg", theta.clone_params())?;
        let ids = seg.register_params(&mut g, true)?;
        let slog = seg.forward_with(&mut g, img, &ids)?;
        let yn = g.leaf(self.roi.clone());
        let loss = roi_loss(&mut g, slog, yn, &[0])?;
        let grads = g.backward(loss.node)?;
        Ok((loss.total(&g), strip_scope(grads, "seg.")))
    }
}

/// Fresh state for a run: shared backbone across arms (same seed, same
/// two-channel initialization), widened head for context arms, plus a
/// generator for the learned arm.
pub fn init_state(cfg: &ColabConfig, arm: ContextArm) -> Result<TrainState> {
    cfg.validate()?;
    if matches!(arm, ContextArm::Dilated | ContextArm::Oracle) && cfg.t != 2 {
        return Err(Error::invalid(format!(
            "{arm} supplies 2 context classes; set t = 2, not {}",
            cfg.t
        )));
    }
    let backbone = build_net(
        &NetConfig {
            in_channels: 1,
            base_width: cfg.base_width,
            depth: cfg.depth,
            out_channels: 2,
            seed: derive_seed(cfg.seed, "seg-init"),
        },
        "seg",
    )?;
    let seg = match arm {
        ContextArm::None => backbone,
        _ => backbone.extend_head(cfg.t)?,
    };
    let gen = match arm {
        ContextArm::Colab => Some(build_net(
            &NetConfig {
                in_channels: 1,
                base_width: cfg.base_width,
                depth: cfg.depth,
                out_channels: cfg.t,
                seed: derive_seed(cfg.seed, "gen-init"),
            },
            "gen",
        )?),
        _ => None,
    };
    Ok(TrainState {
        cfg: cfg.clone(),
        arm,
        iteration: 0,
        seg,
        seg_vel: NetworkParams::new(),
        gen,
        gen_vel: NetworkParams::new(),
        batch_rng: SeedStream::new(cfg.seed).child("batches"),
        init_loss: None,
        history: Vec::new(),
        warnings: Vec::new(),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    cfg: ColabConfig,
    arm: ContextArm,
    iteration: usize,
    rng: RngState,
    init_loss: Option<f64>,
    history: Vec<EpochRecord>,
    warnings: Vec<String>,
    seg_cfg: NetConfig,
    gen_cfg: Option<NetConfig>,
    seg_params: Vec<String>,
    seg_vel: Vec<String>,
    gen_params: Vec<String>,
    gen_vel: Vec<String>,
}

fn write_group(dir: &Path, sub: &str, params: &NetworkParams) -> Result<Vec<String>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
    let mut names = Vec::new();
    for (name, t) in params.iter() {
        write_tensor(&d.join(format!("{name}.ten")), t)?;
        names.push(name.clone());
    }
    Ok(names)
}

fn read_group(dir: &Path, sub: &str, names: &[String]) -> Result<NetworkParams> {
    let d = dir.join(sub);
    let mut params = NetworkParams::new();
    for name in names {
        params.insert(name.clone(), read_tensor(&d.join(format!("{name}.ten")))?);
    }
    Ok(params)
}

impl TrainState {
    /// Writes the complete state under `dir`: a manifest plus one tensor
    /// file per parameter and velocity slot.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let manifest = Manifest {
            cfg: self.cfg.clone(),
            arm: self.arm,
            iteration: self.iteration,
            rng: self.batch_rng.state(),
            init_loss: self.init_loss,
            history: self.history.clone(),
            warnings: self.warnings.clone(),
            seg_cfg: self.seg.cfg().clone(),
            gen_cfg: self.gen.as_ref().map(|g| g.cfg().clone()),
            seg_params: write_group(dir, "seg", &self.seg.params)?,
            seg_vel: write_group(dir, "seg_vel", &self.seg_vel)?,
            gen_params: match &self.gen {
                Some(g) => write_group(dir, "gen", &g.params)?,
                None => Vec::new(),
            },
            gen_vel: write_group(dir, "gen_vel", &self.gen_vel)?,
        };
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<TrainState> {
        let path = dir.join("manifest.json");
        let body =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: Manifest = serde_json::from_str(&body)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let seg = SegNetwork::from_params(m.seg_cfg.clone(), "seg", read_group(dir, "seg", &m.seg_params)?)?;
        let gen = match &m.gen_cfg {
            Some(cfg) => Some(SegNetwork::from_params(
                cfg.clone(),
                "gen",
                read_group(dir, "gen", &m.gen_params)?,
            )?),
            None => None,
        };
        Ok(TrainState {
            cfg: m.cfg,
            arm: m.arm,
            iteration: m.iteration,
            seg,
            seg_vel: read_group(dir, "seg_vel", &m.seg_vel)?,
            gen,
            gen_vel: read_group(dir, "gen_vel", &m.gen_vel)?,
            batch_rng: SeedStream::from_state(&m.rng),
            init_loss: m.init_loss,
            history: m.history,
            warnings: m.warnings,
        })
    }
}

/// The static label fields a given arm trains on; the learned arm and the
/// plain arm return None. Also returns any generation warnings.
pub fn static_context(
    arm: ContextArm,
    cfg: &ColabConfig,
    train: &[Case],
) -> Result<(Option<Vec<LabelField>>, Vec<String>)> {
    let mut warnings = Vec::new();
    let fields = match arm {
        ContextArm::None | ContextArm::Colab => None,
        ContextArm::Kmeans => {
            let images: Vec<Tensor> = train.iter().map(|c| c.image.clone()).collect();
            let regions: Vec<Mask> = train
                .iter()
                .map(|c| Mask::from_fn(c.roi_mask.height(), c.roi_mask.width(), |_, _| true))
                .collect();
            let (fields, info) =
                kmeans_context(&images, &regions, cfg.t, derive_seed(cfg.seed, "kmeans"))?;
            if let Some(w) = info.warning {
                warnings.push(w);
            }
            Some(fields)
        }
        ContextArm::Dilated => Some(
            train
                .iter()
                .map(|c| dilated_mask_context(&c.roi_mask, cfg.m, cfg.tau))
                .collect::<Result<Vec<_>>>()?,
        ),
        ContextArm::Oracle => {
            let mut fields = Vec::new();
            for c in train {
                let (f, warn) = oracle_context(&c.organ_mask, &c.roi_mask)?;
                if let Some(w) = warn {
                    warnings.push(format!("{}: {w}", c.id));
                }
                fields.push(f);
            }
            Some(fields)
        }
    };
    Ok((fields, warnings))
}

struct BatchTensors {
    images: Tensor,
    rois: Vec<Mask>,
    softs: Vec<Option<SoftMask>>,
    cases: Vec<usize>,
    origins: Vec<(usize, usize)>,
}

impl BatchTensors {
    fn views(&self) -> Vec<PatchView<'_>> {
        self.rois
            .iter()
            .zip(&self.softs)
            .map(|(r, s)| PatchView { roi: r, soft: s.as_ref() })
            .collect()
    }
}

fn assemble_batch(
    train: &[Case],
    softs: &[Option<SoftMask>],
    patches: &[Patch],
    p: usize,
) -> Result<BatchTensors> {
    let n = patches.len();
    let mut images = Tensor::zeros(vec![n, 1, p, p]);
    let mut rois = Vec::with_capacity(n);
    let mut cropped = Vec::with_capacity(n);
    let mut cases = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for (i, patch) in patches.iter().enumerate() {
        let case = &train[patch.case];
        let w = case.roi_mask.width();
        let src = case.image.data();
        let dst = images.data_mut();
        for y in 0..p {
            let row = (patch.y0 + y) * w + patch.x0;
            dst[(i * p + y) * p..(i * p + y) * p + p].copy_from_slice(&src[row..row + p]);
        }
        rois.push(case.roi_mask.crop(patch.y0, patch.x0, p));
        cropped.push(softs[patch.case].as_ref().map(|s| s.crop(patch.y0, patch.x0, p)));
        cases.push(patch.case);
        origins.push((patch.y0, patch.x0));
    }
    Ok(BatchTensors { images, rois, softs: cropped, cases, origins })
}

fn gen_label_case(gen: &SegNetwork, case: &Case) -> Result<LabelField> {
    let shape = case.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let batched = Tensor::new(vec![1, 1, h, w], case.image.data().to_vec())?;
    let logits = gen.forward(&batched)?;
    let t = logits.shape()[1];
    let lf = LabelField::from_tensor_slice(t, h, w, logits.data())?;
    logits_to_q(&lf)
}

fn mean_of(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

pub fn eval_on_cases(net: &SegNetwork, cases: &[Case]) -> Result<Vec<MetricsRecord>> {
    cases
        .iter()
        .map(|c| {
            let pred = predict_case(net, &c.image)?;
            evaluate_case(&c.id, &pred, &c.roi_mask)
        })
        .collect()
}

/// Rewrites the whole metrics table from history; running it again after a
/// resume reproduces the uninterrupted file byte for byte.
pub fn write_metrics_csv(
    path: &Path,
    arm: ContextArm,
    seed: u64,
    history: &[EpochRecord],
) -> Result<()> {
    let mut s = String::from("arm,seed,epoch,dsc,sen,prc,hd95,loss_ce,loss_dice,loss_roi\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            arm,
            seed,
            r.epoch,
            fmt_sig(r.dsc),
            fmt_sig(r.sen),
            fmt_sig(r.prc),
            fmt_sig(r.hd95),
            fmt_sig(r.loss_ce),
            fmt_sig(r.loss_dice),
            fmt_sig(r.loss_roi),
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn dump_divergence(opts: &TrainOptions, state: &TrainState, loss: f64) {
    let Some(dir) = &opts.out_dir else { return };
    let body = serde_json::json!({
        "iteration": state.iteration,
        "loss": loss,
        "init_loss": state.init_loss,
        "arm": state.arm,
        "seed": state.cfg.seed,
    });
    let _ = fs::write(dir.join("divergence.json"), body.to_string());
}

/// Advances `state` to the end of training (or `max_epochs`), using the
/// arm's default label source. Returns per-case test metrics of the last
/// reached epoch.
pub fn continue_training(
    state: &mut TrainState,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    let (fields, mut warnings) = static_context(state.arm, &state.cfg, data.train)?;
    state.warnings.append(&mut warnings);
    let provider = match fields {
        Some(f) => ContextProvider::Static(f),
        None if state.arm == ContextArm::Colab => ContextProvider::Generator,
        None => ContextProvider::Plain,
    };
    continue_training_with(state, data, opts, &provider)
}

/// Same loop with an explicit label source, used by equivalence tests.
pub fn continue_training_with(
    state: &mut TrainState,
    data: &TrainData,
    opts: &TrainOptions,
    provider: &ContextProvider,
) -> Result<TrainOutput> {
    let cfg = state.cfg.clone();
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("need non-empty train and test splits"));
    }
    if let ContextProvider::Static(fields) = provider {
        if fields.len() != data.train.len() {
            return Err(Error::invalid(format!(
                "{} static label fields for {} training cases",
                fields.len(),
                data.train.len()
            )));
        }
    }
    if matches!(provider, ContextProvider::Generator) && state.gen.is_none() {
        return Err(Error::invalid("learned label source needs a generator in the state"));
    }

    // full-image soft masks are fixed by the ground truth; None marks
    // cases with no foreground anywhere (labeled far-background)
    let softs: Vec<Option<SoftMask>> = match provider {
        ContextProvider::Plain => data.train.iter().map(|_| None).collect(),
        _ => data
            .train
            .iter()
            .map(|c| case_soft_mask(&c.roi_mask, cfg.m, cfg.tau))
            .collect::<Result<Vec<_>>>()?,
    };
    let sampler = PatchSampler::new(data.train, cfg.patch_size, cfg.m)?;
    let p = cfg.patch_size;

    let total = cfg.total_iterations();
    let stop = match opts.max_epochs {
        Some(me) => total.min(me * cfg.iters_per_epoch),
        None => total,
    };

    // generator-produced full-image labels, invalidated on generator change
    let mut q_cache: Vec<Option<LabelField>> = vec![None; data.train.len()];
    let mut mass_warned_epoch = usize::MAX;

    let mut ce_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut roi_sum = 0.0;
    let mut test_records = Vec::new();
    let mut batch_log = Vec::new();

    while state.iteration < stop {
        let i = state.iteration;
        let patches = sampler.sample_batch(cfg.batch_size, cfg.roi_patch_fraction, &mut state.batch_rng)?;
        let batch = assemble_batch(data.train, &softs, &patches, p)?;
        batch_log.push(patches);

        // generator refresh: probe step, outer-gradient estimate, descent
        if matches!(provider, ContextProvider::Generator) && cfg.is_update_iteration(i) {
            let views = batch.views();
            let roi_t = roi_batch(&views, p, p)?;
            let soft_t = soft_mask_batch(&views, p, p)?;
            let gen = state.gen.as_ref().unwrap();
            let problem = NetworkBilevel {
                seg: &state.seg,
                gen,
                images: &batch.images,
                roi: &roi_t,
                soft: &soft_t,
            };
            let update = (|| -> Result<GradMap> {
                let mut theta_star = state.seg.params.clone_params();
                for _ in 0..cfg.inner_steps {
                    theta_star = inner_step(&problem, &theta_star, &gen.params, cfg.alpha)?;
                }
                let hg = hypergradient(
                    &problem,
                    &state.seg.params,
                    &theta_star,
                    &gen.params,
                    cfg.alpha,
                    EpsRule::Auto,
                )?;
                if hg.vanished {
                    state
                        .warnings
                        .push(format!("iteration {i}: outer gradient vanished, zero generator step"));
                }
                Ok(hg.grad)
            })();
            match update {
                Ok(grad) => {
                    let gen = state.gen.as_mut().unwrap();
                    sgd_step(&mut gen.params, &grad, cfg.beta, cfg.momentum, &mut state.gen_vel)?;
                    q_cache.iter_mut().for_each(|e| *e = None);
                }
                Err(Error::NonFinite(what)) => {
                    state.warnings.push(format!(
                        "iteration {i}: non-finite generator update skipped ({what})"
                    ));
                }
                Err(e) => return Err(e),
            }
        }

        // segmenter targets from the current label source
        let target_t = match provider {
            ContextProvider::Plain => {
                let fields: Vec<LabelField> =
                    batch.rois.iter().map(plain_binary_field).collect();
                stack_fields(&fields)?
            }
            ContextProvider::Static(fields) => {
                let qs: Vec<LabelField> = batch
                    .cases
                    .iter()
                    .zip(&batch.origins)
                    .map(|(&c, &(y0, x0))| fields[c].crop(y0, x0, p))
                    .collect();
                target_batch(&batch.views(), &qs, cfg.t)?
            }
            ContextProvider::Generator => {
                let gen = state.gen.as_ref().unwrap();
                let mut qs = Vec::with_capacity(batch.cases.len());
                for (&c, &(y0, x0)) in batch.cases.iter().zip(&batch.origins) {
                    if q_cache[c].is_none() {
                        q_cache[c] = Some(gen_label_case(gen, &data.train[c])?);
                    }
                    qs.push(q_cache[c].as_ref().unwrap().crop(y0, x0, p));
                }
                if cfg.is_update_iteration(i) {
                    let epoch = i / cfg.iters_per_epoch;
                    if let Some(w) = class_mass_warning(&qs, epoch, &mut mass_warned_epoch) {
                        state.warnings.push(w);
                    }
                }
                target_batch(&batch.views(), &qs, cfg.t)?
            }
        };

        // segmenter update, with the foreground objective logged alongside
        let mut g = Graph::new();
        let img = g.leaf(batch.images.clone());
        let ids = state.seg.register_params(&mut g, true)?;
        let slog = state.seg.forward_with(&mut g, img, &ids)?;
        let tn = g.leaf(target_t);
        let loss = seg_loss(&mut g, slog, tn)?;
        let views = batch.views();
        let yn = {
            let t = roi_batch(&views, p, p)?;
            g.leaf(t)
        };
        let rl = roi_loss(&mut g, slog, yn, &[0])?;
        let total_loss = loss.total(&g);
        if !total_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {i}")));
        }
        let init = *state.init_loss.get_or_insert(total_loss);
        if total_loss > DIVERGENCE_FACTOR * init {
            dump_divergence(opts, state, total_loss);
            return Err(Error::Diverged(format!(
                "iteration {i}: loss {total_loss:.6} exceeds {DIVERGENCE_FACTOR} x initial {init:.6}"
            )));
        }
        let grads = g.backward(loss.node)?;
        let seg_grads = strip_scope(grads, "seg.");
        sgd_step(&mut state.seg.params, &seg_grads, cfg.alpha, cfg.momentum, &mut state.seg_vel)?;

        ce_sum += loss.breakdown["ce"];
        dice_sum += loss.breakdown["dice"];
        roi_sum += rl.breakdown["roi_bce"];
        state.iteration += 1;

        if state.iteration % cfg.iters_per_epoch == 0 {
            let epoch = state.iteration / cfg.iters_per_epoch;
            test_records = eval_on_cases(&state.seg, data.test)?;
            let iters = cfg.iters_per_epoch as f64;
            state.history.push(EpochRecord {
                epoch,
                dsc: mean_of(&test_records, |r| r.dsc),
                sen: mean_of(&test_records, |r| r.sen),
                prc: mean_of(&test_records, |r| r.prc),
                hd95: mean_of(&test_records, |r| r.hd95),
                loss_ce: ce_sum / iters,
                loss_dice: dice_sum / iters,
                loss_roi: roi_sum / iters,
            });
            ce_sum = 0.0;
            dice_sum = 0.0;
            roi_sum = 0.0;
            if let Some(dir) = &opts.out_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                state.save(&dir.join("checkpoint"))?;
                write_metrics_csv(&dir.join("metrics.csv"), state.arm, cfg.seed, &state.history)?;
            }
        }
    }

    if test_records.is_empty() {
        test_records = eval_on_cases(&state.seg, data.test)?;
    }
    Ok(TrainOutput { state: state.clone(), test_records, batch_log })
}

fn class_mass_warning(
    qs: &[LabelField],
    epoch: usize,
    warned_epoch: &mut usize,
) -> Option<String> {
    if qs.is_empty() || *warned_epoch == epoch {
        return None;
    }
    let t = qs[0].classes();
    let mut mass = vec![0.0; t];
    let mut count = 0usize;
    for q in qs {
        for c in 0..t {
            for y in 0..q.height() {
                for x in 0..q.width() {
                    mass[c] += q.get(c, y, x);
                }
            }
        }
        count += q.height() * q.width();
    }
    let (argmax, max) = mass
        .iter()
        .enumerate()
        .map(|(c, &m)| (c, m / count as f64))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if max > MASS_COLLAPSE {
        *warned_epoch = epoch;
        return Some(format!(
            "epoch {epoch}: generator mass concentrates on one class ({:.1}% on class {argmax})",
            max * 100.0
        ));
    }
    None
}

/// Full learned-label run from scratch.
pub fn train_colab(cfg: &ColabConfig, data: &TrainData, opts: &TrainOptions) -> Result<TrainOutput> {
    let mut state = init_state(cfg, ContextArm::Colab)?;
    continue_training(&mut state, data, opts)
}

/// Full static-label (or label-free) run from scratch.
pub fn train_baseline(
    cfg: &ColabConfig,
    arm: ContextArm,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    if arm == ContextArm::Colab {
        return Err(Error::invalid("the learned arm is started by train_colab"));
    }
    let mut state = init_state(cfg, arm)?;
    continue_training(&mut state, data, opts)
}

/// Run with caller-supplied per-case label fields: the equivalence target
/// for a frozen generator.
pub fn train_with_static_context(
    cfg: &ColabConfig,
    arm: ContextArm,
    fields: Vec<LabelField>,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    let mut state = init_state(cfg, arm)?;
    let provider = ContextProvider::Static(fields);
    continue_training_with(&mut state, data, opts, &provider)
}
