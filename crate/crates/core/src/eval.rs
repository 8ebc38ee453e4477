//! Prediction quality and model-usage analyses, and their report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::MlpClassifier;
use crate::data::{Phase, SequenceSample};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::selection::{evaluate_windows, EnsembleEval, FeatureLayers, Strategy};
use crate::seq2seq::Seq2SeqModel;

/// `10·log10(max_I² / mse)`; `+∞` when the error is exactly zero.
pub fn psnr_from_mse(mse: f64, max_intensity: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_intensity * max_intensity / mse).log10()
    }
}

/// PSNR over all values of two equally shaped frame buffers.
pub fn psnr(pred: &[f32], truth: &[f32], max_intensity: f64) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "psnr",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    if !(max_intensity > 0.0) {
        return Err(Error::Config(format!("max intensity must be positive, got {max_intensity}")));
    }
    let sse: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / pred.len() as f64, max_intensity))
}

/// Formats a PSNR value for reports.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_owned()
    } else {
        format!("{v:.4}")
    }
}

/// Mean of all members' predictions for one window prefix, `n × D` values.
pub fn average_baseline<T: Real>(members: &[Seq2SeqModel<T>], prefix: &[f32]) -> Result<Vec<f32>> {
    let first = members.first().ok_or_else(|| Error::Config("no models".into()))?;
    let spec = first.spec;
    let d = spec.frame_dim;
    let batch = crate::seq2seq::SequenceBatch {
        frames: (0..spec.input_len())
            .map(|t| {
                let row: Vec<T> = prefix
                    .get(t * d..(t + 1) * d)
                    .ok_or(Error::Shape {
                        op: "window prefix",
                        left: (prefix.len(), 1),
                        right: (spec.input_len() * d, 1),
                    })?
                    .iter()
                    .map(|&v| T::of(v as f64))
                    .collect();
                crate::numerics::Matrix::from_vec(1, d, row)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut sum = vec![0.0f64; spec.pred_len * d];
    for model in members {
        let out = crate::seq2seq::forward_eval(model, &batch)?;
        for (k, frame) in out.prediction.iter().enumerate() {
            for (s, v) in sum[k * d..(k + 1) * d].iter_mut().zip(frame.row(0)) {
                *s += v.as_f64();
            }
        }
    }
    Ok(sum.iter().map(|&s| (s / members.len() as f64) as f32).collect())
}

/// Pooled-error PSNR of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCurve {
    pub name: String,
    pub overall: f64,
    /// Offsets `1..=n`.
    pub per_horizon: Vec<f64>,
}

/// Overall and per-offset PSNR from per-offset squared errors
/// (`sse[k][i]`), pooling the error over all windows and pixels.
pub fn curve_from_sse(name: &str, sse: &[Vec<f64>], frame_dim: usize, max_intensity: f64) -> Result<StrategyCurve> {
    let windows = sse.first().map_or(0, |k| k.len());
    if windows == 0 {
        return Err(Error::EmptyDataset("test set"));
    }
    let per_k: Vec<f64> = sse.iter().map(|k| k.iter().sum::<f64>()).collect();
    let per_horizon = per_k
        .iter()
        .map(|&s| psnr_from_mse(s / (windows * frame_dim) as f64, max_intensity))
        .collect();
    let total: f64 = per_k.iter().sum();
    Ok(StrategyCurve {
        name: name.to_owned(),
        overall: psnr_from_mse(total / (windows * frame_dim * sse.len()) as f64, max_intensity),
        per_horizon,
    })
}

pub fn psnr_vs_horizon(
    eval: &EnsembleEval,
    strategy: Strategy,
    clf: Option<&MlpClassifier>,
    max_intensity: f64,
) -> Result<StrategyCurve> {
    let sse = eval.strategy_sse(strategy, clf)?;
    curve_from_sse(strategy.name(), &sse, eval.frame_dim, max_intensity)
}

/// One window's chosen member, with where the window sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub episode: u32,
    pub phase: Phase,
    pub window_index: usize,
    /// Zero-based member index.
    pub model: usize,
}

/// Empirical frequency of each member per phase.
pub fn usage_distribution(selections: &[Selection], members: usize) -> Result<BTreeMap<Phase, Vec<f64>>> {
    let mut counts: BTreeMap<Phase, Vec<usize>> = BTreeMap::new();
    for s in selections {
        if s.model >= members {
            return Err(Error::Data(format!("selection names member {} of {members}", s.model + 1)));
        }
        counts.entry(s.phase).or_insert_with(|| vec![0; members])[s.model] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(phase, c)| {
            let total: usize = c.iter().sum();
            (phase, c.iter().map(|&v| v as f64 / total as f64).collect())
        })
        .collect())
}

/// Counts and column-normalized probabilities of member switches between
/// adjacent windows. Entry `(next, prev)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub counts: Vec<Vec<usize>>,
    /// `None` for predecessors never observed.
    pub columns: Vec<Option<Vec<f64>>>,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn probability(&self, next: usize, prev: usize) -> Option<f64> {
        self.columns[prev].as_ref().map(|c| c[next])
    }
}

/// Transition matrices per phase over windows adjacent in the same
/// (episode, phase) block. Input order does not matter.
pub fn transition_matrix(selections: &[Selection], members: usize) -> Result<BTreeMap<Phase, TransitionMatrix>> {
    let mut sorted = selections.to_vec();
    sorted.sort_by_key(|s| (s.episode, s.phase, s.window_index));
    let mut counts: BTreeMap<Phase, Vec<Vec<usize>>> = BTreeMap::new();
    for s in &sorted {
        if s.model >= members {
            return Err(Error::Data(format!("selection names member {} of {members}", s.model + 1)));
        }
        counts.entry(s.phase).or_insert_with(|| vec![vec![0; members]; members]);
    }
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.episode == b.episode && a.phase == b.phase && b.window_index == a.window_index + 1 {
            counts.get_mut(&a.phase).expect("phase seen")[b.model][a.model] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(phase, c)| {
            let columns = (0..members)
                .map(|prev| {
                    let total: usize = (0..members).map(|next| c[next][prev]).sum();
                    (total > 0).then(|| (0..members).map(|next| c[next][prev] as f64 / total as f64).collect())
                })
                .collect();
            (phase, TransitionMatrix { counts: c, columns })
        })
        .collect())
}

/// Name used for a phase in reports.
pub fn phase_label(p: Phase) -> &'static str {
    match p {
        Phase::Baseline => "non-seizure",
        Phase::Event => "seizure",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub members: usize,
    pub windows: usize,
    pub max_intensity: f64,
    pub curves: Vec<StrategyCurve>,
    /// Strategy whose choices feed the usage and transition analyses.
    pub usage_strategy: Strategy,
    pub usage: BTreeMap<Phase, Vec<f64>>,
    pub transitions: BTreeMap<Phase, TransitionMatrix>,
    /// Share of windows where reconstruction and oracle selection agree.
    pub recon_oracle_agreement: f64,
    /// Ground-truth cluster counts per member under oracle selection, when
    /// the data carries cluster labels.
    pub cluster_table: Option<Vec<Vec<usize>>>,
}

impl EvalReport {
    pub fn curve(&self, name: &str) -> Option<&StrategyCurve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// Share of each member's oracle-assigned windows held by its most
    /// common cluster (`None` for members with no windows).
    pub fn cluster_purity(&self) -> Option<Vec<Option<f64>>> {
        self.cluster_table.as_ref().map(|t| {
            t.iter()
                .map(|row| {
                    let total: usize = row.iter().sum();
                    (total > 0).then(|| *row.iter().max().unwrap() as f64 / total as f64)
                })
                .collect()
        })
    }
}

/// Builds the full report for `strategies` on `test`. Extra single-model
/// baselines are appended as their own curves.
pub fn evaluate<T: Real>(
    members: &[Seq2SeqModel<T>],
    test: &[SequenceSample],
    strategies: &[Strategy],
    clf: Option<&MlpClassifier>,
    layers: FeatureLayers,
    max_intensity: f64,
    baselines: &[(String, Vec<Seq2SeqModel<T>>)],
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let windows: Vec<&[f32]> = test.iter().map(|s| s.frames.as_slice()).collect();
    let eval = evaluate_windows(members, &windows, layers)?;
    let mut curves = Vec::new();
    for &s in strategies {
        curves.push(psnr_vs_horizon(&eval, s, clf, max_intensity)?);
    }
    for (name, models) in baselines {
        let b = evaluate_windows(models, &windows, FeatureLayers::Top)?;
        let sse = b.strategy_sse(Strategy::Oracle, None)?;
        curves.push(curve_from_sse(name, &sse, b.frame_dim, max_intensity)?);
    }
    let oracle: Vec<usize> = (0..eval.len()).map(|i| eval.oracle(i).model).collect();
    let recon: Vec<usize> = (0..eval.len()).map(|i| eval.reconstruction(i).model).collect();
    let agreement = oracle.iter().zip(&recon).filter(|(a, b)| a == b).count() as f64 / oracle.len() as f64;
    let selections: Vec<Selection> = test
        .iter()
        .zip(&oracle)
        .map(|(s, &model)| Selection {
            episode: s.episode,
            phase: s.phase,
            window_index: s.window_index,
            model,
        })
        .collect();
    let m = members.len();
    let cluster_table = if test.iter().all(|s| s.cluster.is_some()) {
        let k = test.iter().filter_map(|s| s.cluster).max().map_or(0, |c| c as usize + 1);
        let mut t = vec![vec![0usize; k]; m];
        for (s, &model) in test.iter().zip(&oracle) {
            t[model][s.cluster.unwrap() as usize] += 1;
        }
        Some(t)
    } else {
        None
    };
    Ok(EvalReport {
        members: m,
        windows: test.len(),
        max_intensity,
        curves,
        usage_strategy: Strategy::Oracle,
        usage: usage_distribution(&selections, m)?,
        transitions: transition_matrix(&selections, m)?,
        recon_oracle_agreement: agreement,
        cluster_table,
    })
}

pub fn psnr_csv(r: &EvalReport) -> String {
    let mut s = String::from("strategy,horizon,psnr_db\n");
    for c in &r.curves {
        for (k, v) in c.per_horizon.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", c.name, k + 1, format_db(*v));
        }
        let _ = writeln!(s, "{},all,{}", c.name, format_db(c.overall));
    }
    s
}

pub fn usage_csv(r: &EvalReport) -> String {
    let mut s = String::from("phase,model,probability\n");
    for (phase, dist) in &r.usage {
        for (m, p) in dist.iter().enumerate() {
            let _ = writeln!(s, "{},{},{p:.6}", phase_label(*phase), m + 1);
        }
    }
    s
}

pub fn transitions_csv(r: &EvalReport) -> String {
    let mut s = String::from("phase,prev_model,next_model,probability\n");
    for (phase, t) in &r.transitions {
        for prev in 0..t.size() {
            for next in 0..t.size() {
                let p = t.probability(next, prev).map_or("nan".to_owned(), |p| format!("{p:.6}"));
                let _ = writeln!(s, "{},{},{},{p}", phase_label(*phase), prev + 1, next + 1);
            }
        }
    }
    s
}

pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Evaluation report");
    let _ = writeln!(s, "=================");
    let _ = writeln!(s, "members: {}", r.members);
    let _ = writeln!(s, "test windows: {}", r.windows);
    let _ = writeln!(s, "max intensity: {}", r.max_intensity);
    let _ = writeln!(s);
    let _ = writeln!(s, "PSNR (dB, pooled over all predicted frames)");
    for c in &r.curves {
        let tag = if c.name == "oracle" { "  (not deployable)" } else { "" };
        let _ = writeln!(s, "  {:<12} {:>10}{tag}", c.name, format_db(c.overall));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "PSNR by prediction offset");
    for c in &r.curves {
        let row: Vec<String> = c.per_horizon.iter().map(|v| format_db(*v)).collect();
        let _ = writeln!(s, "  {:<12} {}", c.name, row.join(" "));
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "reconstruction/oracle agreement: {:.4}",
        r.recon_oracle_agreement
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Model usage ({} selection)", r.usage_strategy.name());
    for (phase, dist) in &r.usage {
        let row: Vec<String> = dist.iter().map(|p| format!("{p:.4}")).collect();
        let _ = writeln!(s, "  {:<12} {}", phase_label(*phase), row.join(" "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Transition probabilities (column = previous model, row = next model)");
    for (phase, t) in &r.transitions {
        let _ = writeln!(s, "  {}", phase_label(*phase));
        for next in 0..t.size() {
            let row: Vec<String> = (0..t.size())
                .map(|prev| t.probability(next, prev).map_or("     -".to_owned(), |p| format!("{p:.4}")))
                .collect();
            let _ = writeln!(s, "    {}", row.join(" "));
        }
    }
    if let (Some(table), Some(purity)) = (&r.cluster_table, r.cluster_purity()) {
        let _ = writeln!(s);
        let _ = writeln!(s, "Ground-truth clusters per member (oracle selection)");
        for (m, (row, p)) in table.iter().zip(&purity).enumerate() {
            let counts: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            let p = p.map_or("-".to_owned(), |p| format!("{p:.3}"));
            let _ = writeln!(s, "  model {:<3} {}  purity {p}", m + 1, counts.join(""));
        }
    }
    s
}

/// Writes `report.txt`, `psnr.csv`, `usage.csv` and `transitions.csv`.
pub fn write_report(dir: &Path, r: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("report.txt", report_text(r)),
        ("psnr.csv", psnr_csv(r)),
        ("usage.csv", usage_csv(r)),
        ("transitions.csv", transitions_csv(r)),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sel(phase: Phase, models: &[usize]) -> Vec<Selection> {
        models
            .iter()
            .enumerate()
            .map(|(i, &model)| Selection {
                episode: 1,
                phase,
                window_index: i,
                model,
            })
            .collect()
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr(&[0.5, 0.25], &[0.5, 0.25], 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(1.0, 2.0) - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr_from_mse(1.0, 2.0) - 6.0206).abs() < 1e-4);
        assert!(psnr(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn usage_counts() {
        let u = usage_distribution(&sel(Phase::Event, &[0, 0, 1, 2]), 4).unwrap();
        assert_eq!(u[&Phase::Event], vec![0.5, 0.25, 0.25, 0.0]);
        let u = usage_distribution(&sel(Phase::Baseline, &[2, 2, 2]), 3).unwrap();
        assert_eq!(u[&Phase::Baseline], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_counted_transitions() {
        let t = transition_matrix(&sel(Phase::Event, &[0, 0, 1]), 2).unwrap();
        let t = &t[&Phase::Event];
        assert_eq!(t.columns[0], Some(vec![0.5, 0.5]));
        assert_eq!(t.columns[1], None);
        let t = transition_matrix(&sel(Phase::Baseline, &[1, 1, 1, 1]), 3).unwrap();
        assert_eq!(t[&Phase::Baseline].probability(1, 1), Some(1.0));
    }

    #[test]
    fn transitions_do_not_cross_blocks() {
        let mut s = sel(Phase::Event, &[0, 0]);
        s.push(Selection {
            episode: 2,
            phase: Phase::Event,
            window_index: 2,
            model: 1,
        });
        s.push(Selection {
            episode: 1,
            phase: Phase::Event,
            window_index: 5,
            model: 1,
        });
        let t = transition_matrix(&s, 2).unwrap();
        assert_eq!(t[&Phase::Event].counts, vec![vec![1, 0], vec![0, 0]]);
    }

    #[test]
    fn curve_pools_errors() {
        // Two windows, two offsets, frame_dim 1.
        let sse = vec![vec![0.0, 0.02], vec![0.04, 0.04]];
        let c = curve_from_sse("x", &sse, 1, 1.0).unwrap();
        assert!((c.per_horizon[0] - psnr_from_mse(0.01, 1.0)).abs() < 1e-12);
        assert!((c.per_horizon[1] - psnr_from_mse(0.04, 1.0)).abs() < 1e-12);
        assert!((c.overall - psnr_from_mse(0.025, 1.0)).abs() < 1e-12);
        assert!(curve_from_sse("x", &[vec![]], 1, 1.0).is_err());
    }

    fn constant_model(v: f64) -> Seq2SeqModel<f64> {
        let spec = crate::seq2seq::SequenceSpec::new(4, 2, 3).unwrap();
        let arch = crate::seq2seq::Architecture { hidden: 2, layers: 1, ..Default::default() };
        let mut m = Seq2SeqModel::zeros(spec, arch);
        m.pred_proj.bias.data_mut().iter_mut().for_each(|b| *b = v);
        m
    }

    #[test]
    fn average_of_constant_predictors() {
        let prefix = [0.3f32; 6];
        let avg = average_baseline(&[constant_model(1.0), constant_model(3.0)], &prefix).unwrap();
        assert_eq!(avg, vec![2.0; 6]);
        let avg = average_baseline(&[constant_model(0.7), constant_model(-0.7)], &prefix).unwrap();
        assert_eq!(avg, vec![0.0; 6]);
        let mut rng = crate::numerics::Rng::new(4);
        let one = Seq2SeqModel::<f64>::init(&mut rng, constant_model(0.0).spec, constant_model(0.0).arch);
        let prefix: Vec<f32> = (0..6).map(|i| i as f32 * 0.1).collect();
        let avg = average_baseline(std::slice::from_ref(&one), &prefix).unwrap();
        let mut window = prefix.clone();
        window.resize(12, 0.0);
        let batch = crate::seq2seq::SequenceBatch::<f64>::from_windows(&one.spec, [window.as_slice()]).unwrap();
        let out = crate::seq2seq::forward_eval(&one, &batch).unwrap();
        let direct: Vec<f32> = out.prediction.iter().flat_map(|f| f.row(0).iter().map(|&v| v as f32)).collect();
        assert_eq!(avg, direct);
        assert!(average_baseline::<f64>(&[], &prefix).is_err());
    }

    proptest! {
        #[test]
        fn usage_and_columns_normalize(models in proptest::collection::vec(0usize..4, 2..60), flips in proptest::collection::vec(any::<bool>(), 60)) {
            let s: Vec<Selection> = models
                .iter()
                .enumerate()
                .map(|(i, &model)| Selection {
                    episode: 1 + (i / 7) as u32,
                    phase: if flips[i] { Phase::Event } else { Phase::Baseline },
                    window_index: i % 7,
                    model,
                })
                .collect();
            for dist in usage_distribution(&s, 4).unwrap().values() {
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for t in transition_matrix(&s, 4).unwrap().values() {
                for col in t.columns.iter().flatten() {
                    prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn psnr_decreases_with_error(a in 1e-6f64..10.0, b in 1e-6f64..10.0, max_i in 0.1f64..4.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, max_i) > psnr_from_mse(b, max_i));
        }
    }
}
