//! Acceptance criteria. Each test prints one `criterion N ...` line.
//!
//! Run with `cargo test -p t2g-core --test acceptance -- --nocapture`.
//! Criteria 7 and 8 need the real datasets: point `T2G_CA_DIR` /
//! `T2G_CH_DIR` at a split directory or a single CSV.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use t2g_core::autodiff::{Graph, ParamStore, Tensor};
use t2g_core::block::{BlockSpec, Dropouts, ForwardCtx, T2GBlock};
use t2g_core::data::{load_dataset, synthetic, NumericPolicy, PreparedDataset, RawTargets, SchemaSpec, TabularDataset};
use t2g_core::export::export_graphs;
use t2g_core::gradcheck::{gradcheck, GradcheckConfig};
use t2g_core::graph_estimator::{Symmetry, TopologyMode};
use t2g_core::model::{parameter_count, ModelConfig, T2GFormer};
use t2g_core::training::{train, write_history, TrainConfig};

// Written to the stdout handle so the line survives libtest's output capture.
fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let status = if pass { "PASS" } else { "FAIL" };
    emit(format!("criterion {n:>2} {name}: {status} ({})", detail.as_ref()));
}

fn blocked(n: u32, name: &str, detail: &str) {
    emit(format!("criterion {n:>2} {name}: BLOCKED ({detail})"));
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for mode in [TopologyMode::Knowledge, TopologyMode::Adaptive, TopologyMode::Free] {
        let config = GradcheckConfig {
            topology_mode: mode,
            ..GradcheckConfig::default()
        };
        assert_eq!((config.n_layers, config.d_token, config.heads), (2, 16, 4));
        let r = gradcheck(&config, None).expect("gradcheck runs");
        let st = r.groups.iter().find(|g| g.group == "straight_through").unwrap();
        let groups_ok = r.groups.iter().all(|g| g.elements == 0 || g.max_rel_error < 1e-4);
        let st_live = st.elements > 0 && st.max_abs_grad > 0.0;
        pass &= r.passed && groups_ok && st_live && r.max_rel_error < 1e-4;
        let offending: Vec<&str> = r.offending().iter().map(|p| p.name.as_str()).collect();
        details.push(format!(
            "{}: max rel {:.1e}, straight-through max |g| {:.1e}{}",
            mode.name(),
            r.max_rel_error,
            st.max_abs_grad,
            if offending.is_empty() {
                String::new()
            } else {
                format!(", offending {offending:?}")
            }
        ));
    }
    // N = 3 numerical + 2 categorical features
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 60.0;
    report(1, "gradient fidelity", pass, format!("{}; {elapsed:.1}s", details.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gamma.iter().zip(beta)).map(|(v, (g, b))| (v - mean) * inv * g + b).collect()
}

/// `x·W + b` with `W` stored `[in, out]` row-major.
fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
        .collect()
}

/// Standard pre-norm multi-head scaled-dot-product attention layer with a
/// ReGLU feed-forward network, one sample at a time.
fn reference_layer(p: &HashMap<String, Vec<f64>>, x: &[f64], n_feat: usize, d: usize, heads: usize) -> Vec<f64> {
    let get = |k: &str| p[&format!("layer0.{k}")].as_slice();
    let (wq, bq) = (get("w_head.weight"), get("w_head.bias"));
    let (wk, bk) = if p.contains_key("layer0.w_tail.weight") {
        (get("w_tail.weight"), get("w_tail.bias"))
    } else {
        (wq, bq)
    };
    let tokens: Vec<&[f64]> = x.chunks(d).collect();
    let xn: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(t, get("norm1.gamma"), get("norm1.beta"))).collect();
    let q: Vec<Vec<f64>> = xn.iter().map(|t| linear(t, wq, bq)).collect();
    let k: Vec<Vec<f64>> = xn.iter().map(|t| linear(t, wk, bk)).collect();
    let v: Vec<Vec<f64>> = xn.iter().map(|t| linear(t, get("w_value.weight"), get("w_value.bias"))).collect();
    let m = d / heads;
    let mut attended = vec![vec![0.0; d]; n_feat];
    for h in 0..heads {
        let r = h * m..(h + 1) * m;
        for i in 0..n_feat {
            let scores: Vec<f64> = (0..n_feat)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n_feat {
                for c in r.clone() {
                    attended[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n_feat {
        let msg = linear(&attended[i], get("w_out.weight"), get("w_out.bias"));
        let h: Vec<f64> = msg.iter().zip(tokens[i]).map(|(a, b)| a + b).collect();
        let hn = layer_norm(&h, get("norm2.gamma"), get("norm2.beta"));
        let a = linear(&hn, get("ffn.value.weight"), get("ffn.value.bias"));
        let gate = linear(&hn, get("ffn.gate.weight"), get("ffn.gate.bias"));
        let hidden: Vec<f64> = a.iter().zip(&gate).map(|(a, g)| a * g.max(0.0)).collect();
        let f = linear(&hidden, get("ffn.out.weight"), get("ffn.out.bias"));
        out.extend(f.iter().zip(&h).map(|(a, b)| a + b));
    }
    out
}

#[test]
fn criterion_02_degenerates_to_attention() {
    let (n_feat, d, heads, rows) = (5, 12, 3, 4);
    let mut worst = 0.0f64;
    for symmetry in [Symmetry::Symmetric, Symmetry::Asymmetric] {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = BlockSpec {
                d_token: d,
                heads,
                n_features: n_feat,
                d_embedding: 6,
                graph_estimator: true,
                weight_symmetry: symmetry,
                topology_symmetry: Symmetry::Asymmetric,
                topology_mode: TopologyMode::AllOnes,
                self_loops: true,
                threshold: 0.5,
                dropouts: Dropouts {
                    attention: 0.0,
                    ffn: 0.0,
                    residual: 0.0,
                },
            };
            let mut store = ParamStore::<f64>::new();
            let block = T2GBlock::new(&mut store, "layer0", spec, &mut rng);
            for p in store.iter_mut() {
                let relation = p.name().ends_with("relation");
                for v in p.data.iter_mut() {
                    *v = if relation { 1.0 } else { rng.gen_range(-0.8..0.8) };
                }
            }
            let params: HashMap<String, Vec<f64>> =
                store.iter().map(|(_, p)| (p.name().to_string(), p.data.clone())).collect();
            let x: Vec<f64> = (0..rows * n_feat * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![rows, n_feat, d], x.clone()).unwrap());
            let mut drng = ChaCha8Rng::seed_from_u64(1);
            // training mode: dropout 0 must still be the identity
            let mut ctx = ForwardCtx::train(&mut drng);
            let (out, _) = block.forward(&mut g, &store, xv, &mut ctx, None).unwrap();
            let got = g.value(out).data();
            for b in 0..rows {
                let span = b * n_feat * d..(b + 1) * n_feat * d;
                let want = reference_layer(&params, &x[span.clone()], n_feat, d, heads);
                for (a, w) in got[span].iter().zip(&want) {
                    worst = worst.max((a - w).abs());
                }
            }
        }
    }
    let pass = worst <= 1e-6;
    report(2, "attention degeneration", pass, format!("max abs diff {worst:.2e} over 10 models"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[derive(Clone, Debug)]
struct InvariantCase {
    n_features: usize,
    heads: usize,
    head_width: usize,
    rows: usize,
    weight_symmetry: Symmetry,
    topology_symmetry: Symmetry,
    mode: TopologyMode,
    self_loops: bool,
    bias: f64,
    seed: u64,
}

fn invariant_case() -> impl Strategy<Value = InvariantCase> {
    let sym = prop_oneof![Just(Symmetry::Symmetric), Just(Symmetry::Asymmetric)];
    let mode = prop_oneof![
        Just(TopologyMode::Knowledge),
        Just(TopologyMode::Adaptive),
        Just(TopologyMode::Free),
        Just(TopologyMode::AllOnes)
    ];
    (
        (2usize..=7, 1usize..=3, 1usize..=4, 1usize..=4),
        (sym.clone(), sym, mode, prop::bool::weighted(0.25)),
        (-1.5f64..1.5, any::<u64>()),
    )
        .prop_map(|((n_features, heads, head_width, rows), (ws, ts, mode, self_loops), (bias, seed))| InvariantCase {
            n_features,
            heads,
            head_width,
            rows,
            weight_symmetry: ws,
            topology_symmetry: ts,
            mode,
            self_loops,
            bias,
            seed,
        })
}

fn check_invariants(c: &InvariantCase) -> Result<(), TestCaseError> {
    let (n, h) = (c.n_features, c.heads);
    let d = h * c.head_width;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let spec = BlockSpec {
        d_token: d,
        heads: h,
        n_features: n,
        d_embedding: t2g_core::graph_estimator::default_embedding_dim(n),
        graph_estimator: true,
        weight_symmetry: c.weight_symmetry,
        topology_symmetry: c.topology_symmetry,
        topology_mode: c.mode,
        self_loops: c.self_loops,
        threshold: 0.5,
        dropouts: Dropouts::default(),
    };
    let mut store = ParamStore::<f64>::new();
    let block = T2GBlock::new(&mut store, "layer0", spec, &mut rng);
    if let Some(b) = block.topology.as_ref().and_then(|t| t.bias) {
        store.get_mut(b).data.iter_mut().for_each(|v| *v = c.bias);
    }
    let run = |x: Vec<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![c.rows, n, d], x).unwrap());
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let (_, art) = block.forward(&mut g, &store, xv, &mut ForwardCtx::eval(&mut drng), None).unwrap();
        (
            g.value(art.graph).to_f64(),
            g.value(art.adjacency).clone(),
            g.value(art.edge_scores).to_f64(),
        )
    };
    let x1: Vec<f64> = (0..c.rows * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x2: Vec<f64> = (0..c.rows * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (gm, adj, scores) = run(x1);
    let k = adj.shape()[0];
    let a = adj.to_f64();
    for t in 0..c.rows * h {
        for i in 0..n {
            let row = &gm[(t * n + i) * n..(t * n + i + 1) * n];
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() <= 1e-6, "row sum {s}");
            if !c.self_loops {
                prop_assert_eq!(row[i], 0.0);
            }
            for j in 0..n {
                if i != j && row[j] != 0.0 {
                    prop_assert!(a[((t % k) * n + i) * n + j] != 0.0, "weight outside adjacency");
                }
                if c.weight_symmetry == Symmetry::Symmetric {
                    let sij = scores[(t * n + i) * n + j];
                    let sji = scores[(t * n + j) * n + i];
                    prop_assert!((sij - sji).abs() <= 1e-12, "asymmetric scores {sij} {sji}");
                }
            }
        }
    }
    if c.mode.is_static() && c.topology_symmetry == Symmetry::Symmetric {
        for t in 0..k {
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(a[(t * n + i) * n + j], a[(t * n + j) * n + i]);
                }
            }
        }
    }
    if c.mode == TopologyMode::Knowledge {
        prop_assert_eq!(k, h);
        let (_, adj2, _) = run(x2);
        prop_assert_eq!(adj2.data(), adj.data());
    }
    Ok(())
}

#[test]
fn criterion_03_graph_invariants() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let count = std::cell::Cell::new(0usize);
    let result = runner.run(&invariant_case(), |c| {
        count.set(count.get() + 1);
        check_invariants(&c)
    });
    let elapsed = start.elapsed().as_secs_f64();
    let pass = result.is_ok() && elapsed < 60.0;
    let detail = match &result {
        Ok(()) => format!("{} random models, {elapsed:.1}s", count.get()),
        Err(e) => format!("{e}"),
    };
    report(3, "graph invariants", pass, detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_embedding_dimension_rule() {
    let mut got = Vec::new();
    for (n, want) in [(8usize, 6usize), (93, 14), (2, 2)] {
        let data = synthetic::mixed(t2g_core::data::Task::Regression, n, &[], 0, [4, 2, 2], 0);
        let config = ModelConfig {
            n_layers: 1,
            d_token: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = T2GFormer::<f64>::new(&data.schema, config, 0).unwrap();
        let e = model.store.id("layer0.e_head").unwrap();
        got.push((n, want, model.embedding_dim(), model.store.get(e).shape()[2]));
    }
    let pass = got.iter().all(|&(_, w, d, s)| d == w && s == w);
    let detail: Vec<String> = got.iter().map(|(n, _, d, _)| format!("N={n}: d={d}")).collect();
    report(4, "embedding dimension rule", pass, detail.join(", "));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_topology_freeze() {
    let data = synthetic::pairwise_interactions([400, 100, 100], 11);
    let prep = PreparedDataset::<f32>::fit_transform(&data, NumericPolicy::Standard);
    let config = ModelConfig {
        n_layers: 2,
        d_token: 16,
        heads: 4,
        ..ModelConfig::default()
    };
    let mut model = T2GFormer::new(&data.schema, config, 3).unwrap();
    let topo_ids: Vec<_> = (0..model.blocks.len())
        .flat_map(|l| model.blocks[l].topology_params().into_iter().chain(model.readout.topology_params(l)))
        .collect();
    let tc = TrainConfig {
        batch_size: 64,
        max_epochs: 8,
        lr_backbone: 3e-3,
        lr_column_embedding: 3e-2,
        freeze_epoch: Some(3),
        freeze_patience: None,
        early_stop_patience: 100,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    let mut before = None;
    let out = train(&mut model, &prep, &tc, &mut |r, m| {
        let bits: Vec<Vec<u32>> = topo_ids.iter().map(|&id| m.store.get(id).data.iter().map(|v| v.to_bits()).collect()).collect();
        if r.epoch == 2 {
            before = Some(bits.clone());
        }
        if r.frozen {
            let e = export_graphs(m, &prep.val, 50).unwrap();
            let heads: Vec<Vec<u64>> = e
                .layers
                .iter()
                .map(|l| l.heads.iter().flatten().flatten().map(|v| v.to_bits()).collect())
                .collect();
            snapshots.push((r.epoch, heads, bits));
        }
    })
    .unwrap();
    let first = &snapshots[0];
    let a_constant = snapshots.iter().all(|s| s.1 == first.1);
    let params_constant = snapshots.iter().all(|s| s.2 == first.2);
    // topology parameters did move before the freeze
    let moved = before.as_ref().is_some_and(|b| *b != first.2);
    let pass = out.freeze_epoch == Some(3) && snapshots.len() == 6 && a_constant && params_constant && moved;
    report(
        5,
        "topology freeze",
        pass,
        format!(
            "frozen after epoch {:?}, {} frozen epochs, A constant: {a_constant}, E/b unchanged: {params_constant}, moved before freeze: {moved}",
            out.freeze_epoch,
            snapshots.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

/// Equal-frequency bin index of every value.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / values.len();
    }
    out
}

/// Plug-in mutual information (nats) between two discrete variables.
fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (pa[&x] * pb[&y])).ln())
        .sum()
}

/// Pairs `(i, j)` ranked by `I((x_i, x_j); y)`.
fn pair_ranking(data: &TabularDataset) -> Vec<((usize, usize), f64)> {
    let s = &data.train;
    let nf = data.schema.n_features();
    let RawTargets::Values(y) = &s.targets else { unreachable!() };
    let bins = 6;
    let yb = quantile_bins(y, bins);
    let cols: Vec<Vec<usize>> = (0..nf)
        .map(|f| quantile_bins(&(0..s.rows).map(|r| s.numerical[r * nf + f]).collect::<Vec<_>>(), bins))
        .collect();
    let mut ranked = Vec::new();
    for i in 0..nf {
        for j in i + 1..nf {
            let pair: Vec<usize> = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * bins + b).collect();
            ranked.push(((i, j), mutual_information(&pair, &yb)));
        }
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

#[test]
fn criterion_06_relation_recovery() {
    let start = Instant::now();
    let data = synthetic::pairwise_interactions([2000, 500, 500], 2024);
    let ranked = pair_ranking(&data);
    let top: BTreeSet<(usize, usize)> = ranked[..2].iter().map(|r| r.0).collect();
    let detectable = top == BTreeSet::from([(0, 1), (2, 3)]);

    let prep = PreparedDataset::<f32>::fit_transform(&data, NumericPolicy::Standard);
    let mut hits = 0;
    let mut densities = Vec::new();
    let mut metrics = Vec::new();
    let mut head_shares = Vec::new();
    for seed in 0..5u64 {
        let config = ModelConfig {
            n_layers: 2,
            d_token: 32,
            heads: 8,
            ..ModelConfig::default()
        };
        let mut model = T2GFormer::new(&data.schema, config, seed).unwrap();
        let tc = TrainConfig {
            seed,
            max_epochs: 40,
            early_stop_patience: 10,
            lr_backbone: 1e-3,
            lr_column_embedding: 1e-2,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &prep, &tc, &mut |_, _| {}).unwrap();
        let e = export_graphs(&model, &prep.val, 500).unwrap();
        let u = &e.layers[0].union;
        let edge = |i: usize, j: usize| u[i][j] || u[j][i];
        if edge(0, 1) && edge(2, 3) {
            hits += 1;
        }
        let off: usize = (0..6).map(|i| (0..6).filter(|&j| j != i && u[i][j]).count()).sum();
        densities.push(off as f64 / 30.0);
        // share of heads holding each edge: target pairs against the rest
        let heads = &e.layers[0].heads;
        let share = |i: usize, j: usize| heads.iter().filter(|h| h[i][j] > 0.0).count() as f64 / heads.len() as f64;
        let mut target = Vec::new();
        let mut other = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                let pair = (i.min(j), i.max(j));
                if pair == (0, 1) || pair == (2, 3) {
                    target.push(share(i, j));
                } else {
                    other.push(share(i, j));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        head_shares.push((mean(&target), mean(&other)));
        metrics.push(out.best_val_metric);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = detectable && hits >= 4 && elapsed < 600.0;
    report(
        6,
        "relation recovery",
        pass,
        format!(
            "oracle top-2 pairs {:?} (MI {:.3}, {:.3}; third {:.3}); {hits}/5 seeds recover both; \
             first-layer union density {:?}; per-head edge share target/other {:?}; val RMSE {:?}; {elapsed:.0}s",
            top,
            ranked[0].1,
            ranked[1].1,
            ranked[2].1,
            densities.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>(),
            head_shares.iter().map(|(t, o)| format!("{t:.2}/{o:.2}")).collect::<Vec<_>>(),
            metrics.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7, 8

fn desk_scale(n: u32, name: &str, env: &str, schema: &str, check: impl Fn(f64) -> bool) {
    let Some(path) = std::env::var_os(env).map(PathBuf::from) else {
        blocked(n, name, &format!("{env} not set; dataset is not available offline"));
        return;
    };
    let spec = SchemaSpec::bundled(schema).unwrap();
    let data = load_dataset(&path, &spec).expect("dataset loads");
    let prep = PreparedDataset::<f32>::fit_transform(&data, NumericPolicy::Standard);
    let mut model = T2GFormer::new(&data.schema, ModelConfig::default(), 0).unwrap();
    let tc = TrainConfig {
        batch_size: spec.batch_size.unwrap_or(256),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&mut model, &prep, &tc, &mut |r, _| {
        if let Some(v) = r.val {
            eprintln!("epoch {} val {:.4}", r.epoch, v.metric);
        }
    })
    .unwrap();
    let pass = check(out.test.metric);
    report(
        n,
        name,
        pass,
        format!(
            "test {} {:.4} at best epoch {} of {}; {:.0}s",
            data.schema.task.metric_name(),
            out.test.metric,
            out.best_epoch,
            out.epochs_run,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_california_regression() {
    desk_scale(7, "california regression", "T2G_CA_DIR", "california", |rmse| rmse <= 0.52);
}

#[test]
fn criterion_08_churn_classification() {
    desk_scale(8, "churn classification", "T2G_CH_DIR", "churn", |acc| acc >= 0.85);
}

// ---------------------------------------------------------------- 9

fn california() -> (TabularDataset, &'static str) {
    match std::env::var_os("T2G_CA_DIR") {
        Some(p) => (
            load_dataset(&PathBuf::from(p), &SchemaSpec::bundled("california").unwrap()).unwrap(),
            "California housing",
        ),
        None => (synthetic::california_like([2000, 500, 500], 9), "generated California-layout data"),
    }
}

#[test]
fn criterion_09_ablation_plumbing() {
    let (data, source) = california();
    let prep = PreparedDataset::<f32>::fit_transform(&data, NumericPolicy::Standard);
    let one_epoch = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let run = |config: ModelConfig| {
        let mut model = T2GFormer::new(&data.schema, config.clone(), 0).unwrap();
        let out = train(&mut model, &prep, &one_epoch, &mut |_, _| {}).unwrap();
        assert!(out.best_val_metric.is_finite());
        assert_eq!(model.parameter_count(), parameter_count(&data.schema, &config));
        let e = export_graphs(&model, &prep.val, 512).unwrap();
        (model.parameter_count(), e)
    };
    let mut failures = Vec::new();
    let mut trained = 0;

    let mut counts = BTreeSet::new();
    for v in ["AwSt", "AwAt", "SwSt", "SwAt"] {
        let mut c = ModelConfig::default();
        c.set_variant(v).unwrap();
        counts.insert(run(c).0);
        trained += 1;
    }
    if counts.len() != 4 {
        failures.push(format!("variant parameter counts {counts:?}"));
    }

    let loops: Vec<_> = [false, true]
        .into_iter()
        .map(|self_loops| {
            trained += 1;
            run(ModelConfig {
                self_loops,
                ..ModelConfig::default()
            })
        })
        .collect();
    let diag = |e: &t2g_core::export::GraphExport| -> f64 {
        e.layers.iter().map(|l| (0..l.mean_weights.len()).map(|i| l.mean_weights[i][i]).sum::<f64>()).sum()
    };
    if loops[0].0 != loops[1].0 || diag(&loops[0].1) != 0.0 || diag(&loops[1].1) <= 0.0 {
        failures.push("self-loop graphs not distinguished".into());
    }

    let mut counts = BTreeSet::new();
    let mut exports = Vec::new();
    for mask in [[true, true, true], [false, true, true], [false, false, true], [false, false, false], [true, true, false]] {
        let (count, e) = run(ModelConfig {
            per_layer_ge: Some(mask.to_vec()),
            ..ModelConfig::default()
        });
        counts.insert(count);
        exports.push(e);
        trained += 1;
    }
    if counts.len() != 4 {
        failures.push(format!("per-layer mask parameter counts {counts:?}"));
    }
    // equal counts, different layers gated: [F,T,T] against [T,T,F]
    let gated = |e: &t2g_core::export::GraphExport| -> Vec<bool> { e.layers.iter().map(|l| l.graph_estimator).collect() };
    if gated(&exports[1]) == gated(&exports[4]) || exports[1].layers[0].union == exports[4].layers[0].union {
        failures.push("per-layer masks with equal counts give identical graphs".into());
    }

    let mut counts = BTreeSet::new();
    for mode in [TopologyMode::Knowledge, TopologyMode::Adaptive, TopologyMode::Free] {
        counts.insert(
            run(ModelConfig {
                topology_mode: mode,
                ..ModelConfig::default()
            })
            .0,
        );
        trained += 1;
    }
    if counts.len() != 3 {
        failures.push(format!("topology mode parameter counts {counts:?}"));
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!("{trained} configurations trained one epoch on {source}")
    } else {
        failures.join("; ")
    };
    report(9, "ablation plumbing", pass, detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_determinism() {
    let data = synthetic::mixed(t2g_core::data::Task::Multiclass, 4, &[3, 5], 3, [300, 100, 100], 5);
    let prep = PreparedDataset::<f32>::fit_transform(&data, NumericPolicy::Standard);
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        max_epochs: 6,
        freeze_patience: Some(1),
        seed: 7,
        ..TrainConfig::default()
    };
    let bytes: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let config = ModelConfig {
                n_layers: 2,
                d_token: 16,
                heads: 4,
                ..ModelConfig::default()
            };
            let mut model = T2GFormer::new(&data.schema, config, 7).unwrap();
            let out = train(&mut model, &prep, &tc, &mut |_, _| {}).unwrap();
            let path = dir.path().join(format!("history{i}.jsonl"));
            write_history(&out.history, &path).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    let pass = bytes[0] == bytes[1] && !bytes[0].is_empty();
    report(10, "determinism", pass, format!("two runs, {} history bytes each, identical: {}", bytes[0].len(), bytes[0] == bytes[1]));
    assert!(pass);
}
