//! End-to-end acceptance gate. Each test covers one numbered criterion
//! and prints a single "criterion NN <name>: PASS" line (FAIL with the
//! collected reasons otherwise). Criteria 1-7, 9 are exact or tight-
//! tolerance oracles; 8 is the desk-scale training smoke; 10 is a
//! directional same-host throughput comparison; 11 records what full-scale
//! result reproduction is out of scope.

use std::sync::Mutex;
use std::time::Instant;

/// Serializes the compute-heavy criteria so wall-clock budgets and
/// throughput ratios stay meaningful when the harness runs tests on
/// several threads.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

use vitslm::data::{split_per_class, synth_dataset};
use vitslm::gradcheck::{
    model_grad_report, op_gradcheck_suite, shared_grad_decomposition, GRAD_TOL,
};
use vitslm::init::shared_scale_factor;
use vitslm::model::checkpoint::{decode_checkpoint, encode_checkpoint};
use vitslm::model::params::is_mlp_path;
use vitslm::model::vit::{bind_params, build_model, forward_graph, patchify};
use vitslm::model::{Batch, MLPVariant, Mode, ModelConfig};
use vitslm::stats::{
    count_macs, count_params, efficiency_ratios, format_params, measure_throughput, Convention,
};
use vitslm::tensor::Graph;
use vitslm::train::{
    adamw_step, paired_t_test, stability_metrics, train, AdamWState, RunMetrics, TTestResult,
    TrainConfig, ADAM_EPS,
};

struct Criterion {
    n: usize,
    name: &'static str,
    failures: Vec<String>,
}

impl Criterion {
    fn new(n: usize, name: &'static str) -> Criterion {
        Criterion { n, name, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, msg: String) {
        if !ok {
            self.failures.push(msg);
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            println!("criterion {:02} {}: PASS", self.n, self.name);
        } else {
            println!("criterion {:02} {}: FAIL", self.n, self.name);
            for f in &self.failures {
                println!("  - {f}");
            }
            panic!(
                "criterion {:02} {} failed:\n{}",
                self.n,
                self.name,
                self.failures.join("\n")
            );
        }
    }
}

fn baseline() -> MLPVariant {
    MLPVariant::Baseline
}

fn grouped() -> MLPVariant {
    MLPVariant::Grouped { group_size: 2 }
}

fn shallow() -> MLPVariant {
    MLPVariant::Shallow { width_ratio: 0.5 }
}

#[test]
fn criterion_01_parameter_accounting_exact() {
    let mut c = Criterion::new(1, "exact parameter accounting at the full-size config");
    let base = count_params(&ModelConfig::base_16(baseline())).unwrap();
    let grp = count_params(&ModelConfig::base_16(grouped())).unwrap();
    let shl = count_params(&ModelConfig::base_16(shallow())).unwrap();

    for (name, got, want) in [
        ("baseline stored params", base.unique_params, 86_567_656),
        ("grouped stored params", grp.unique_params, 58_233_064),
        ("shallow stored params", shl.unique_params, 58_237_672),
        ("baseline MLP params", base.mlp_params, 56_669_184),
        ("grouped MLP params", grp.mlp_params, 28_334_592),
        ("shallow MLP params", shl.mlp_params, 28_339_200),
        ("baseline unique MLPs", base.unique_mlp_blocks, 12),
        ("grouped unique MLPs", grp.unique_mlp_blocks, 6),
        ("shallow unique MLPs", shl.unique_mlp_blocks, 12),
    ] {
        c.check(got == want, format!("{name}: {got}, want {want}"));
    }
    for (name, got, want) in [
        ("baseline display", format_params(base.unique_params), "86.6M"),
        ("grouped display", format_params(grp.unique_params), "58.2M"),
        ("shallow display", format_params(shl.unique_params), "58.2M"),
        ("baseline MLP display", format_params(base.mlp_params), "56.7M"),
        ("grouped MLP display", format_params(grp.mlp_params), "28.3M"),
        ("shallow MLP display", format_params(shl.mlp_params), "28.3M"),
    ] {
        c.check(got == want, format!("{name}: {got}, want {want}"));
    }
    let reduction = 100.0 * (1.0 - grp.unique_params as f64 / base.unique_params as f64);
    c.check(
        (reduction - 32.7).abs() <= 0.1,
        format!("stored-parameter reduction {reduction:.4}%, want 32.7% +- 0.1%"),
    );
    c.finish();
}

#[test]
fn criterion_02_mac_accounting() {
    let mut c = Criterion::new(2, "multiply-accumulate counts in the dense convention");
    let mb = count_macs(&ModelConfig::base_16(baseline()), Convention::DenseOnly).unwrap();
    let mg = count_macs(&ModelConfig::base_16(grouped()), Convention::DenseOnly).unwrap();
    let ms = count_macs(&ModelConfig::base_16(shallow()), Convention::DenseOnly).unwrap();

    c.check(mg == mb, format!("grouped MACs {mg} != baseline MACs {mb}"));
    let gb = mb as f64 / 1e9;
    let gs = ms as f64 / 1e9;
    c.check(
        (gb / 16.9 - 1.0).abs() <= 0.005,
        format!("baseline {gb:.4} GMACs, want within 0.5% of 16.9"),
    );
    c.check(
        (gs / 11.3 - 1.0).abs() <= 0.005,
        format!("shallow {gs:.4} GMACs, want within 0.5% of 11.3"),
    );
    c.check(mb == 16_848_500_736, format!("baseline MACs {mb}, want 16848500736"));
    c.check(ms == 11_271_124_992, format!("shallow MACs {ms}, want 11271124992"));
    c.finish();
}

#[test]
fn criterion_03_efficiency_ratios() {
    let mut c = Criterion::new(3, "efficiency ratios at the reference accuracies");
    let base = count_params(&ModelConfig::base_16(baseline())).unwrap();
    let grp = count_params(&ModelConfig::base_16(grouped())).unwrap();
    let shl = count_params(&ModelConfig::base_16(shallow())).unwrap();

    let eb = efficiency_ratios(&base, 81.05).unwrap();
    let eg = efficiency_ratios(&grp, 81.47).unwrap();
    let es = efficiency_ratios(&shl, 81.25).unwrap();

    c.check(
        (eg.acc_per_mparam - 1.40).abs() <= 0.01,
        format!("grouped acc/Mparam {:.4}, want 1.40 +- 0.01", eg.acc_per_mparam),
    );
    c.check(
        (1.38..=1.41).contains(&es.acc_per_mparam),
        format!("shallow acc/Mparam {:.4}, want 1.39-1.40 +- 0.01", es.acc_per_mparam),
    );
    c.check(
        (eb.acc_per_mparam - 0.94).abs() <= 0.01,
        format!("baseline acc/Mparam {:.4}, want 0.94 +- 0.01", eb.acc_per_mparam),
    );
    c.check(
        (es.acc_per_gmac - 7.20).abs() <= 0.05,
        format!("shallow acc/GMAC {:.4}, want 7.20 +- 0.05", es.acc_per_gmac),
    );
    c.check(
        (eb.acc_per_gmac - 4.80).abs() <= 0.05,
        format!("baseline acc/GMAC {:.4}, want 4.80 +- 0.05", eb.acc_per_gmac),
    );
    c.finish();
}

#[test]
fn criterion_04_grouped_init_scaling() {
    let mut c = Criterion::new(4, "grouped storages are the baseline draw scaled by 1/sqrt(2)");
    let seed = 11;
    let cfg = ModelConfig::tiny(baseline());
    let (bp, _) = build_model::<f32>(&cfg, seed).unwrap();
    let (gp, _) = build_model::<f32>(&cfg.with_variant(grouped()), seed).unwrap();
    let factor = shared_scale_factor(2) as f32;

    for lead in (0..cfg.depth).step_by(2) {
        for tensor in ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight"] {
            let path = format!("blocks.{lead}.{tensor}");
            let (_, b) = bp.get(&path).unwrap();
            let (_, g) = gp.get(&path).unwrap();
            let bad = b
                .iter()
                .zip(g)
                .position(|(&bv, &gv)| gv.to_bits() != (bv * factor).to_bits());
            c.check(
                bad.is_none(),
                format!("{path}[{}] is not the scaled baseline value", bad.unwrap_or(0)),
            );
        }
        let path = format!("blocks.{lead}.mlp.fc2.bias");
        let (_, b) = bp.get(&path).unwrap();
        let (_, g) = gp.get(&path).unwrap();
        c.check(
            b.iter().zip(g).all(|(&bv, &gv)| bv.to_bits() == gv.to_bits()),
            format!("{path} was rescaled but must stay untouched"),
        );
        // Both members of the pair resolve to one storage.
        for tensor in ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
            let a = gp.storage_index_of(&format!("blocks.{lead}.{tensor}")).unwrap();
            let b = gp.storage_index_of(&format!("blocks.{}.{tensor}", lead + 1)).unwrap();
            c.check(a == b, format!("blocks {lead} and {} own separate {tensor}", lead + 1));
        }
    }
    c.finish();
}

#[test]
fn criterion_05_shallow_init_slicing() {
    let mut c = Criterion::new(5, "shallow weights are the leading slice of the full-width draw");
    let seed = 11;
    let cfg = ModelConfig::tiny(baseline());
    let (bp, _) = build_model::<f32>(&cfg, seed).unwrap();
    let (sp, _) = build_model::<f32>(&cfg.with_variant(shallow()), seed).unwrap();
    let (h, d) = (cfg.mlp_hidden, cfg.embed_dim);
    let hp = h / 2;

    for b in 0..cfg.depth {
        let (s1, full1) = bp.get(&format!("blocks.{b}.mlp.fc1.weight")).unwrap();
        let (s2, half1) = sp.get(&format!("blocks.{b}.mlp.fc1.weight")).unwrap();
        c.check(
            s1 == [h, d] && s2 == [hp, d],
            format!("block {b} fc1 shapes {s1:?} / {s2:?}"),
        );
        c.check(
            half1
                .iter()
                .zip(&full1[..hp * d])
                .all(|(&a, &b)| a.to_bits() == b.to_bits()),
            format!("block {b} fc1.weight is not the leading {hp} rows"),
        );

        let (_, fullb) = bp.get(&format!("blocks.{b}.mlp.fc1.bias")).unwrap();
        let (_, halfb) = sp.get(&format!("blocks.{b}.mlp.fc1.bias")).unwrap();
        c.check(
            halfb.len() == hp
                && halfb.iter().zip(&fullb[..hp]).all(|(&a, &b)| a.to_bits() == b.to_bits()),
            format!("block {b} fc1.bias is not the leading {hp} entries"),
        );

        let (_, full2) = bp.get(&format!("blocks.{b}.mlp.fc2.weight")).unwrap();
        let (s2, half2) = sp.get(&format!("blocks.{b}.mlp.fc2.weight")).unwrap();
        c.check(s2 == [d, hp], format!("block {b} fc2 shape {s2:?}"));
        let cols_match = (0..d).all(|r| {
            (0..hp).all(|j| half2[r * hp + j].to_bits() == full2[r * h + j].to_bits())
        });
        c.check(cols_match, format!("block {b} fc2.weight is not the leading {hp} columns"));

        let (_, b2_full) = bp.get(&format!("blocks.{b}.mlp.fc2.bias")).unwrap();
        let (_, b2_half) = sp.get(&format!("blocks.{b}.mlp.fc2.bias")).unwrap();
        c.check(
            b2_full.len() == b2_half.len()
                && b2_full.iter().zip(b2_half).all(|(&a, &b)| a.to_bits() == b.to_bits()),
            format!("block {b} fc2.bias must keep its full output width"),
        );
    }
    c.finish();
}

#[test]
fn criterion_06_gradient_oracle() {
    let _serial = heavy_lock();
    let mut c = Criterion::new(6, "finite-difference gradient oracle on ops and the small model");
    let t0 = Instant::now();
    let seed = 5;

    let ops = op_gradcheck_suite(seed).unwrap();
    for op in &ops {
        c.check(
            op.max_rel_err <= GRAD_TOL,
            format!("op {} max rel err {:.3e} > {GRAD_TOL:.0e}", op.name, op.max_rel_err),
        );
    }

    let report = model_grad_report(&ModelConfig::tiny(baseline()), seed, 16, None).unwrap();
    for g in report.groups.iter().filter(|g| !g.pass) {
        c.check(false, format!("group {} max rel err {:.3e}", g.name, g.max_rel_err));
    }
    c.check(report.pass, format!("model max rel err {:.3e}", report.max_rel_err));

    let dev = shared_grad_decomposition(&ModelConfig::tiny(grouped()), seed).unwrap();
    c.check(
        dev <= 1e-10,
        format!("shared gradient vs summed isolated gradients deviates by {dev:.3e} > 1e-10"),
    );

    let secs = t0.elapsed().as_secs_f64();
    c.check(secs < 60.0, format!("gradient oracle took {secs:.1}s, budget 60s"));
    c.finish();
}

#[test]
fn criterion_07_sharing_persistence() {
    let _serial = heavy_lock();
    let mut c = Criterion::new(7, "sharing survives 100 optimizer steps and checkpointing");
    let mut cfg = ModelConfig::tiny(grouped());
    cfg.drop_path_rate = 0.0;
    let (mut params, _) = build_model::<f32>(&cfg, 21).unwrap();

    let ds = synth_dataset(10, 4, 32, 0.05, 77).unwrap();
    let bsz = 32;
    let images = ds.images[..bsz * ds.image_numel()].to_vec();
    let labels = ds.labels[..bsz].to_vec();
    let batch = Batch::hard(images, labels);
    let patches =
        patchify(&batch.images, bsz, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.patch_size)
            .unwrap();

    let mut opt = AdamWState::new(&params);
    for _ in 0..100 {
        let mut g: Graph<f32> = Graph::new();
        let binding = bind_params(&mut g, &params, true).unwrap();
        let out = forward_graph(&mut g, &binding, &cfg, &patches, bsz, Mode::Eval, None).unwrap();
        let loss = g
            .cross_entropy_mixed(out.logits, &batch.label_a, &batch.label_b, &batch.lam)
            .unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f32>> = binding
            .storage_leaves
            .iter()
            .enumerate()
            .map(|(i, &leaf)| {
                g.grad(leaf).unwrap_or_else(|| vec![0.0; params.storages()[i].numel()])
            })
            .collect();
        adamw_step(&mut params, &grads, &mut opt, 1e-3, 0.9, 0.999, ADAM_EPS, 0.05).unwrap();
    }

    for lead in (0..cfg.depth).step_by(2) {
        for tensor in ["mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
            let (_, a) = params.get(&format!("blocks.{lead}.{tensor}")).unwrap();
            let (_, b) = params.get(&format!("blocks.{}.{tensor}", lead + 1)).unwrap();
            let equal = a.len() == b.len()
                && a.iter().zip(b).all(|(&x, &y)| x.to_bits() == y.to_bits());
            c.check(
                equal,
                format!("blocks {lead}/{} {tensor} diverged after 100 steps", lead + 1),
            );
        }
    }

    let buf = encode_checkpoint(&cfg, &params).unwrap();
    let (_, decoded) = decode_checkpoint::<f32>(&buf).unwrap();
    let want_groups = cfg.depth / 2;
    c.check(
        decoded.unique_mlp_storage_groups() == want_groups,
        format!(
            "checkpoint decodes to {} MLP storage groups, want {want_groups}",
            decoded.unique_mlp_storage_groups()
        ),
    );
    let mlp_storages = decoded.storages().iter().filter(|s| is_mlp_path(&s.path)).count();
    c.check(
        mlp_storages == want_groups * 4,
        format!("checkpoint holds {mlp_storages} MLP tensors, want {}", want_groups * 4),
    );
    c.finish();
}

fn smoke_protocol() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        warmup_epochs: 3,
        base_lr: 1e-3,
        min_lr: 1e-5,
        batch_size: 128,
        beta1: 0.9,
        beta2: 0.999,
        weight_decay: 0.05,
        mixup_alpha: 0.2,
        cutmix_alpha: 0.2,
        mix_switch_prob: 0.5,
        drop_path: 0.05,
        ema_decay: 0.99,
        seeds: vec![42],
    }
}

fn smoke_checks(c: &mut Criterion, name: &str, m: &RunMetrics) {
    let best_val = m
        .epochs
        .iter()
        .map(|r| r.val_top1.max(r.ema_val_top1))
        .fold(f64::NEG_INFINITY, f64::max);
    c.check(
        m.final_train_top1 >= 90.0,
        format!("{name} train top-1 {:.2} < 90", m.final_train_top1),
    );
    c.check(best_val >= 80.0, format!("{name} held-out top-1 {best_val:.2} < 80"));
    c.check(
        m.epochs[9].train_loss < m.epochs[0].train_loss,
        format!(
            "{name} loss at epoch 10 ({:.4}) not below epoch 1 ({:.4})",
            m.epochs[9].train_loss, m.epochs[0].train_loss
        ),
    );
}

#[test]
fn criterion_08_training_smoke() {
    let _serial = heavy_lock();
    let mut c = Criterion::new(8, "desk-scale training smoke on the synthetic dataset");
    let full = synth_dataset(10, 200, 32, 0.05, 7).unwrap();
    let (tr, va) = split_per_class(&full, 160).unwrap();
    let tc = smoke_protocol();

    let mut shallow_run = None;
    for variant in [baseline(), grouped(), shallow()] {
        let cfg = ModelConfig::tiny(variant);
        let m = train(&cfg, &tc, 42, &tr, &va, None).unwrap();
        eprintln!(
            "smoke {}: train top-1 {:.2}, best val {:.2}, loss {:.3} -> {:.3}",
            cfg.variant.name(),
            m.final_train_top1,
            m.best_ema_top1,
            m.epochs[0].train_loss,
            m.epochs[29].train_loss
        );
        smoke_checks(&mut c, cfg.variant.name(), &m);
        if variant == shallow() {
            shallow_run = Some(m);
        }
    }

    // Same-seed rerun must be bitwise identical apart from wall-clock fields.
    let cfg = ModelConfig::tiny(shallow());
    let again = train(&cfg, &tc, 42, &tr, &va, None).unwrap();
    c.check(
        again.normalized() == shallow_run.unwrap().normalized(),
        "shallow rerun with the same seed produced different metrics".into(),
    );
    c.finish();
}

#[test]
fn criterion_09_stability_and_paired_test() {
    let mut c = Criterion::new(9, "stability metric and paired t-test match hand arithmetic");
    let s = stability_metrics(&[80.0, 81.5, 81.2, 81.0]).unwrap();
    c.check(s.peak_epoch == 2, format!("peak epoch {}, want 2", s.peak_epoch));
    c.check((s.peak - 81.5).abs() < 1e-12, format!("peak {}, want 81.5", s.peak));
    c.check((s.gap - 0.5).abs() < 1e-12, format!("gap {}, want 0.5", s.gap));

    match paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 5.0, 5.0]).unwrap() {
        TTestResult::Test { t, df, p, mean_diff } => {
            c.check((t + 5.0).abs() < 1e-12, format!("t {t}, want -5.0"));
            c.check(df == 3.0, format!("df {df}, want 3"));
            c.check((p - 0.0154).abs() <= 5e-4, format!("p {p:.5}, want 0.0154 +- 0.0005"));
            c.check((mean_diff + 1.25).abs() < 1e-12, format!("mean diff {mean_diff}"));
        }
        other => c.check(false, format!("expected a t statistic, got {other:?}")),
    }
    c.finish();
}

#[test]
fn criterion_10_throughput_direction() {
    let _serial = heavy_lock();
    let mut c = Criterion::new(10, "same-host forward throughput direction at full width");
    let cfg = ModelConfig {
        image_size: 112,
        patch_size: 16,
        in_channels: 3,
        embed_dim: 768,
        depth: 2,
        num_heads: 12,
        mlp_hidden: 3072,
        num_classes: 10,
        drop_path_rate: 0.0,
        variant: baseline(),
    };
    // One-shot sequential timing is unusable on a shared host: background
    // load drifts over tens of seconds, so whichever variant runs last reads
    // fastest. Interleave short measurements round-robin (order mirrored on
    // alternate rounds) and compare per-variant medians; the batch is large
    // enough that GEMM compute dominates the fixed per-call graph setup cost.
    let variants = [baseline(), grouped(), shallow()];
    let built: Vec<_> = variants
        .iter()
        .map(|&v| {
            let vcfg = cfg.with_variant(v);
            let (params, _) = build_model::<f32>(&vcfg, 0).unwrap();
            (vcfg, params)
        })
        .collect();
    let mut rates = [const { Vec::new() }; 3];
    let _ = measure_throughput(&built[0].1, &built[0].0, 32, 2, 3); // machine warmup
    let rounds = 5;
    for round in 0..rounds {
        for k in 0..3 {
            let i = if round % 2 == 0 { k } else { 2 - k };
            let (vcfg, params) = &built[i];
            let rep = measure_throughput(params, vcfg, 32, 1, 3).unwrap();
            rates[i].push(rep.images_per_sec);
        }
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let rb = median(&mut rates[0]);
    let rg = median(&mut rates[1]);
    let rs = median(&mut rates[2]);
    for (i, r) in [rb, rg, rs].iter().enumerate() {
        eprintln!("throughput {}: median {:.1} img/s over {rounds} rounds", variants[i].name(), r);
    }

    let shallow_ratio = rs / rb;
    let grouped_ratio = rg / rb;
    c.check(
        shallow_ratio > 1.0,
        format!("shallow/baseline throughput ratio {shallow_ratio:.3} not > 1.0"),
    );
    c.check(
        (grouped_ratio - 1.0).abs() <= 0.10,
        format!("grouped/baseline throughput ratio {grouped_ratio:.3} outside 1.0 +- 0.10"),
    );
    c.finish();
}

#[test]
fn criterion_11_out_of_scope_results_declared() {
    let c = Criterion::new(11, "full-scale training results are declared out of scope");
    println!(
        "note: full-scale ImageNet-1K 300-epoch training is out of scope at desk scale. The \
         reference top-1 accuracies (81.05 / 81.47 / 81.25), peak epochs (219 / 272 / 273), \
         stability gaps (0.47 / 0.06 / 0.03), and full training curves are not reproduced \
         here; those figures enter this suite only as fixed inputs to the efficiency-ratio \
         checks (criterion 3). Coverage is delegated to criteria 1-10: exact accounting, \
         literal initialization transforms, gradient oracles, sharing persistence, the \
         desk-scale training smoke, and directional throughput."
    );
    c.finish();
}
