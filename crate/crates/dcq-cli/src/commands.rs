//! Subcommand implementations. Every command echoes its resolved config into
//! the run directory and prints a one-line JSON summary on stdout.

use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;

use dcq_core::bounds::{self, ReportOptions};
use dcq_core::data::{
    gaussian_blobs, load_checkpoint, load_mnist_idx, save_checkpoint, write_metrics, BlobsParams,
    Checkpoint, Dataset, Metadata, Split,
};
use dcq_core::distill::{dcq_train, SectionTrainer, TrainConfig, TrainRecord};
use dcq_core::error::{DcqError, Result};
use dcq_core::network::{gather_items, Network};
use dcq_core::optim::{OptConfig, SgdMomentum};
use dcq_core::quant::Scheme;
use dcq_core::rng::{derive_seed, SplitMix64};
use dcq_core::section::{build_subnet, direct_quantization, merge_sections, split_network};
use dcq_core::tensor::Tensor;

use crate::config::{DatasetKind, RunConfig};
use crate::models;

/// Loads the train/test pair for the configured dataset, reshaped to the
/// model's input shape.
pub fn load_datasets(config: &RunConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match config.dataset {
        DatasetKind::Mnist => {
            let dir = &config.mnist_dir;
            let train = load_mnist_idx::<f32>(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
                Split::Train,
            )?;
            let test = load_mnist_idx::<f32>(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
                Split::Test,
            )?;
            let train =
                if config.limit_train > 0 { train.take(config.limit_train)? } else { train };
            Ok((train, test))
        }
        DatasetKind::Blobs => {
            let shape = models::input_shape(&config.model)?;
            let dim: usize = shape.iter().product();
            let params = BlobsParams {
                classes: 4,
                per_class: config.blobs_per_class,
                dim,
                center_spread: 1.0,
                noise: 0.6,
            };
            let ds = gaussian_blobs::<f32>(&params, derive_seed(config.seed, 0xB10B))?;
            split_blobs(ds, &shape, config.seed)
        }
    }
}

/// Shuffles a blobs dataset, reshapes items to the model input, and carves
/// off the last 20% as the test split.
fn split_blobs(
    ds: Dataset<f32>,
    item_shape: &[usize],
    seed: u64,
) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(derive_seed(seed, 0x5807)).shuffle(&mut order);
    let cut = n - n / 5;
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let inputs = ds.inputs.reshaped(&shape)?;
    let gather = |idx: &[usize], split: Split| -> Result<Dataset<f32>> {
        Dataset::new(
            gather_items(&inputs, idx)?,
            idx.iter().map(|&i| ds.labels[i]).collect(),
            ds.num_classes,
            split,
        )
    };
    Ok((gather(&order[..cut], Split::Train)?, gather(&order[cut..], Split::Test)?))
}

/// Cross-entropy on softmax outputs: -mean(ln p_label). The gradient with
/// respect to the probabilities combines with the softmax backward into the
/// usual (p - onehot) / n.
fn cross_entropy(probs: &Tensor<f32>, labels: &[usize]) -> Result<(f64, Tensor<f32>)> {
    let n = labels.len();
    let classes = probs.len() / n;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; probs.len()];
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.data()[i * classes + label].max(1e-12);
        loss -= (p as f64).ln();
        grad[i * classes + label] = -1.0 / (n as f32 * p);
    }
    Ok((loss / n as f64, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Plain supervised training of a softmax classifier; records use section 0.
pub fn train_classifier(
    net: &mut Network<f32>,
    train: &Dataset<f32>,
    test: Option<&Dataset<f32>>,
    opt: OptConfig,
    epochs: usize,
    batch_size: usize,
    record_every: usize,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    let n = train.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let total_steps = steps_per_epoch * epochs;
    let mut optimizer = SgdMomentum::new(opt, total_steps);
    let mut records = Vec::new();
    let started = Instant::now();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let x = gather_items(&train.inputs, chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let trace = net.forward_trace(&x)?;
            let (loss, grad) = cross_entropy(trace.activations.last().unwrap(), &labels)?;
            if !loss.is_finite() {
                return Err(DcqError::Diverged { section: 0, step });
            }
            let grads = net.backward(&trace, &grad)?;
            optimizer.apply(net, &grads)?;
            step += 1;
            if step % record_every.max(1) == 0 || step == total_steps {
                records.push(TrainRecord {
                    section: 0,
                    step,
                    loss,
                    accuracy: None,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
            }
        }
        if let Some(test) = test {
            let accuracy = net.evaluate(&test.inputs, &test.labels)?;
            records.push(TrainRecord {
                section: 0,
                step,
                loss: f64::NAN,
                accuracy: Some(accuracy),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(records)
}

fn run_dir(config: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = config.out_dir.join(config.effective_run_id(command));
    std::fs::create_dir_all(&dir)?;
    config.echo(&dir)?;
    Ok(dir)
}

fn base_metadata(config: &RunConfig) -> Metadata {
    let mut metadata = Metadata::default();
    metadata.seeds.insert("run".into(), config.seed);
    for (k, v) in config.to_flat() {
        metadata.hyperparameters.insert(k, v);
    }
    metadata
}

fn require_checkpoint(path: &Option<PathBuf>, what: &str) -> Result<Checkpoint> {
    let path = path
        .as_ref()
        .ok_or_else(|| DcqError::Config(format!("this command needs the '{what}' config key")))?;
    load_checkpoint(path)
}

pub fn train_fp(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "train-fp")?;
    let (train, test) = load_datasets(config)?;
    let mut net = models::build(&config.model, config.seed)?;
    let records = train_classifier(
        &mut net,
        &train,
        Some(&test),
        OptConfig { lr: config.teacher_lr, momentum: config.momentum, cosine_decay: config.cosine_decay },
        config.teacher_epochs,
        config.batch_size,
        config.record_every,
        derive_seed(config.seed, 0xFB),
    )?;
    let test_accuracy = net.evaluate(&test.inputs, &test.labels)?;
    let checkpoint_path = dir.join("teacher.dcq");
    save_checkpoint(
        &checkpoint_path,
        &Checkpoint { net, split_plan: None, metadata: base_metadata(config) },
    )?;
    write_metrics(&dir.join("metrics.csv"), &config.effective_run_id("train-fp"), &records)?;
    Ok(json!({
        "command": "train-fp",
        "checkpoint": checkpoint_path,
        "test_accuracy": test_accuracy,
    }))
}

pub fn quantize_direct(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "quantize-direct")?;
    let teacher = require_checkpoint(&config.teacher, "teacher")?;
    let (_, test) = load_datasets(config)?;
    let q = direct_quantization(&teacher.net, config.quant_config());
    let accuracy = q.evaluate(&test.inputs, &test.labels)?;
    let path = dir.join("direct.dcq");
    save_checkpoint(
        &path,
        &Checkpoint { net: q, split_plan: None, metadata: base_metadata(config) },
    )?;
    Ok(json!({
        "command": "quantize-direct",
        "checkpoint": path,
        "test_accuracy": accuracy,
    }))
}

pub fn dcq(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "dcq")?;
    let teacher = require_checkpoint(&config.teacher, "teacher")?;
    let (train, test) = load_datasets(config)?;
    let plan = split_network(&teacher.net, &config.split_policy())?;
    let train_config = TrainConfig {
        opt: OptConfig { lr: config.lr, momentum: config.momentum, cosine_decay: config.cosine_decay },
        epochs: config.epochs,
        batch_size: config.batch_size,
        record_every: config.record_every,
        max_steps: 0,
    };
    let (student, records) = dcq_train(
        &teacher.net,
        &train.inputs,
        &plan,
        config.quant_config(),
        config.loss_spec(),
        train_config,
        config.mode,
        config.seed,
    )?;
    let accuracy = student.evaluate(&test.inputs, &test.labels)?;
    let teacher_accuracy = teacher.net.evaluate(&test.inputs, &test.labels)?;
    let path = dir.join("student.dcq");
    save_checkpoint(
        &path,
        &Checkpoint { net: student, split_plan: Some(plan.clone()), metadata: base_metadata(config) },
    )?;
    write_metrics(&dir.join("metrics.csv"), &config.effective_run_id("dcq"), &records)?;
    Ok(json!({
        "command": "dcq",
        "checkpoint": path,
        "sections": plan.section_count(),
        "test_accuracy": accuracy,
        "teacher_accuracy": teacher_accuracy,
    }))
}

pub fn eval(config: &RunConfig) -> Result<serde_json::Value> {
    let checkpoint = if config.student.is_some() {
        require_checkpoint(&config.student, "student")?
    } else {
        require_checkpoint(&config.teacher, "teacher")?
    };
    let (_, test) = load_datasets(config)?;
    let accuracy = checkpoint.net.evaluate(&test.inputs, &test.labels)?;
    Ok(json!({ "command": "eval", "test_accuracy": accuracy, "items": test.len() }))
}

pub fn bounds_report(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "bounds")?;
    let checkpoint = if config.student.is_some() {
        require_checkpoint(&config.student, "student")?
    } else {
        require_checkpoint(&config.teacher, "teacher")?
    };
    let (_, test) = load_datasets(config)?;

    let q64 = checkpoint.net.to_f64();
    let mut fp64 = q64.clone();
    fp64.set_quant(0..fp64.len(), None);

    let calib_n = config.calib_size.min(test.len());
    let calibration =
        dcq_core::network::slice_batch(&test.inputs, 0, calib_n)?.to_f64();
    let options = ReportOptions {
        n_pairs: config.n_pairs,
        n_points: config.n_points,
        empirical_pairs: config.empirical_pairs,
        class_radius: bounds::softmax_class_radius(),
        seed: derive_seed(config.seed, 0xB0),
    };
    let mut report = bounds::build_report(&fp64, &q64, &calibration, &options)?;

    // Classification-stability check only when the bound gives a guarantee.
    if !report.radii.no_guarantee_q {
        let labels: Vec<usize> = test.labels[..calib_n].to_vec();
        report.stability = Some(bounds::check_classification_stability(
            &q64,
            &calibration,
            &labels,
            0.9 * report.radii.radius_q,
            100,
            derive_seed(config.seed, 0xB1),
        )?);
    }

    let path = dir.join("bounds.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    Ok(json!({
        "command": "bounds",
        "report": path,
        "delta_ml": report.delta_ml,
        "lipschitz_product": report.lipschitz_product,
        "lemma_pass_fraction": report.lemma.pass_fraction,
        "theorem_pass_fraction": report.theorem.pass_fraction,
        "passed": report.passed,
    }))
}

pub fn analyze(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "analyze")?;
    let run_id = config.effective_run_id("analyze");
    let teacher = require_checkpoint(&config.teacher, "teacher")?;
    let student = require_checkpoint(&config.student, "student")?;
    if teacher.net.len() != student.net.len() {
        return Err(DcqError::Config("teacher and student topologies differ".into()));
    }
    let (_, test) = load_datasets(config)?;

    let mut layer_stats = Vec::new();
    for i in 0..teacher.net.len() {
        if !teacher.net.layer(i).has_params() {
            continue;
        }
        let t_w = teacher.net.layer(i).weight().unwrap();
        let s_w = student.net.layer(i).weight().unwrap();
        let scheme = student.net.layer(i).quant.map(|q| q.scheme);
        let flips = match scheme {
            Some(Scheme::Binary) => {
                Some(dcq_core::analysis::flip_stats(t_w, s_w, Scheme::Binary, i)?)
            }
            Some(Scheme::Ternary) => {
                Some(dcq_core::analysis::flip_stats(t_w, s_w, Scheme::Ternary, i)?)
            }
            _ => None,
        };
        let hist = dcq_core::analysis::weight_histogram(
            t_w,
            flips.as_ref().map(|f| f.altered.as_slice()),
            dcq_core::analysis::FLIP_HISTOGRAM_BINS,
        )?;
        dcq_core::analysis::write_histogram_csv(&dir, &run_id, i, &hist)?;
        if let Some(flips) = &flips {
            dcq_core::analysis::write_flip_stats_csv(&dir, &run_id, flips)?;
        }
        layer_stats.push(json!({
            "layer": i,
            "altered_fraction": flips.as_ref().map(|f| f.altered_fraction),
            "total_weights": t_w.len(),
        }));
    }

    // Per-pixel loss grids for spatial sections, before and after training.
    let plan = student
        .split_plan
        .clone()
        .map(Ok)
        .unwrap_or_else(|| split_network(&teacher.net, &config.split_policy()))?;
    let x = test.inputs.batch_item(0)?;
    let direct = direct_quantization(&teacher.net, config.quant_config());
    let mut fmap_sections = Vec::new();
    for section in 1..=plan.section_count() {
        let after = dcq_core::analysis::fmap_loss_grid(
            &teacher.net,
            &student.net,
            &x,
            &plan,
            section,
            config.loss_spec(),
        );
        if let Ok(after) = after {
            let before = dcq_core::analysis::fmap_loss_grid(
                &teacher.net,
                &direct,
                &x,
                &plan,
                section,
                config.loss_spec(),
            )?;
            let end_layer = plan.section_range(section)?.end - 1;
            dcq_core::analysis::write_fmap_csv(&dir, &run_id, end_layer, &after)?;
            let mean = |t: &Tensor<f32>| {
                t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len() as f64
            };
            fmap_sections.push(json!({
                "section": section,
                "mean_loss_before": mean(&before),
                "mean_loss_after": mean(&after),
            }));
        }
    }

    Ok(json!({
        "command": "analyze",
        "out_dir": dir.join(&run_id),
        "layers": layer_stats,
        "fmap_sections": fmap_sections,
    }))
}

/// Outcome of one stage count in the splitting study.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stages: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// First shared-clock step at which the merged loss reached the
    /// single-stage run's final loss.
    pub steps_to_single_stage_loss: Option<usize>,
}

impl StageOutcome {
    fn to_json(&self) -> serde_json::Value {
        json!({
            "stages": self.stages,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "steps_to_single_stage_loss": self.steps_to_single_stage_loss,
        })
    }
}

/// Trains the plan's sections in lockstep (all sections advance one step per
/// clock tick, the parallel execution model) and records the merged network's
/// end-to-end distillation loss and accuracy every `eval_every` ticks.
pub fn lockstep_study(
    teacher: &Network<f32>,
    train: &Dataset<f32>,
    probe: &Dataset<f32>,
    k_per_section: usize,
    config: &RunConfig,
    budget: usize,
    eval_every: usize,
) -> Result<(Vec<(usize, f64, f64)>, usize)> {
    let plan = split_network(teacher, &dcq_core::section::SplitPolicy::PerKLayers(k_per_section))?;
    let m = plan.section_count();
    let train_config = TrainConfig {
        opt: OptConfig { lr: config.lr, momentum: config.momentum, cosine_decay: config.cosine_decay },
        epochs: 1,
        batch_size: config.batch_size,
        record_every: usize::MAX,
        max_steps: budget,
    };
    let mut trainers: Vec<SectionTrainer<f32>> = (1..=m)
        .map(|i| {
            let subnet = build_subnet(teacher, &plan, i, config.quant_config())?;
            SectionTrainer::new(
                teacher,
                &subnet,
                &train.inputs,
                config.loss_spec(),
                train_config,
                derive_seed(config.seed, i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let teacher_probe_out = teacher.forward(&probe.inputs)?;
    let mut trajectory = Vec::new();
    for tick in 1..=budget {
        for trainer in &mut trainers {
            trainer.step()?;
        }
        if tick % eval_every == 0 || tick == budget {
            let sections: Vec<_> = trainers.iter().map(|t| t.section_weights()).collect();
            let merged = merge_sections(&sections, &plan, teacher)?;
            let out = merged.forward(&probe.inputs)?;
            let (loss, _) = dcq_core::distill::regression_loss(
                config.loss_spec(),
                &teacher_probe_out,
                &out,
            )?;
            let accuracy = merged.evaluate(&probe.inputs, &probe.labels)?;
            trajectory.push((tick, loss, accuracy));
        }
    }
    Ok((trajectory, m))
}

pub fn split_study(config: &RunConfig) -> Result<serde_json::Value> {
    let dir = run_dir(config, "split-study")?;
    let run_id = config.effective_run_id("split-study");
    let teacher = require_checkpoint(&config.teacher, "teacher")?;
    let (train, test) = load_datasets(config)?;
    let probe = test.take(512)?;

    // stage counts 1, 2, 4 on a four-parameter-layer network
    let stage_plans = [(4usize, 1usize), (2, 2), (1, 4)];
    let mut outcomes = Vec::new();
    let mut csv = String::from("stages,step,loss,accuracy\n");
    let mut single_stage_final: Option<f64> = None;
    for (k, expected_m) in stage_plans {
        let (trajectory, m) = lockstep_study(
            &teacher.net,
            &train,
            &probe,
            k,
            config,
            config.study_steps,
            config.study_eval_every,
        )?;
        if m != expected_m {
            return Err(DcqError::Config(format!(
                "model '{}' yields {m} sections for k={k}, study expects {expected_m}",
                config.model
            )));
        }
        for &(step, loss, acc) in &trajectory {
            csv.push_str(&format!("{m},{step},{loss},{acc}\n"));
        }
        let &(_, final_loss, final_accuracy) = trajectory.last().expect("nonempty");
        if m == 1 {
            single_stage_final = Some(final_loss);
        }
        let target = single_stage_final.expect("single stage runs first");
        let steps_to = trajectory.iter().find(|&&(_, loss, _)| loss <= target).map(|&(s, _, _)| s);
        outcomes.push(StageOutcome {
            stages: m,
            final_loss,
            final_accuracy,
            steps_to_single_stage_loss: steps_to,
        });
    }
    let csv_path = dir.join(format!("{run_id}.study.csv"));
    std::fs::write(&csv_path, csv)?;
    Ok(json!({
        "command": "split-study",
        "table": csv_path,
        "outcomes": outcomes.iter().map(StageOutcome::to_json).collect::<Vec<_>>(),
    }))
}
