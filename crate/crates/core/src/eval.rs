//! Evaluation: held-out accuracy, multi-sample pass@k, and metrics export.
//!
//! Accuracy evaluation rolls out one trajectory per instance and scores it
//! with the same hybrid rule/judge reward used in training, except that a
//! judge transport failure degrades that instance to rule-only scoring
//! (flagged in the record) instead of aborting the run. Pass@k uses the
//! unbiased combinatorial estimator over `n` samples per instance.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_response, Instance, ToyCodec};
use crate::error::{Error, Result};
use crate::policy::{sample_trajectory_with_rng, InstanceView, PolicyParams, SamplingConfig};
use crate::rewards::{extract_answer, rule_score, score_response, JudgeClient};
use crate::rng::{self, purpose};
use crate::trainer::MetricsRecord;

/// Scoring detail for one evaluated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub instance_id: String,
    pub rule: u8,
    /// Judge score when the judge was consulted and reachable.
    pub judge: Option<u8>,
    pub final_score: u8,
    /// True when a judge transport failure forced rule-only scoring.
    pub judge_failed: bool,
    pub predicted: Option<String>,
    pub output_length: usize,
}

/// Aggregate accuracy over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_instances: usize,
    pub accuracy: f64,
    pub records: Vec<InstanceEval>,
}

fn eval_one(
    codec: &ToyCodec,
    instance: &Instance,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    judge: &JudgeClient,
    seed: u64,
    tags: &[u64],
) -> Result<InstanceEval> {
    let view = InstanceView::build(codec, instance)?;
    let mut rng = rng::stream(seed, tags);
    let traj = sample_trajectory_with_rng(params, &view, sampling, &mut rng)?;
    let answer_text = codec.decode(traj.answer_tokens())?;
    let response = render_response(&answer_text);
    match score_response(&instance.question, &response, &instance.gold_answer, judge) {
        Ok(outcome) => Ok(InstanceEval {
            instance_id: instance.id.clone(),
            rule: outcome.rule,
            judge: outcome.judge,
            final_score: outcome.combined,
            judge_failed: outcome.judge_parse_failed,
            predicted: outcome.predicted,
            output_length: traj.len(),
        }),
        // An unreachable judge downgrades this instance to rule-only
        // scoring rather than failing the whole evaluation.
        Err(Error::JudgeTransport(_)) => {
            let predicted = extract_answer(&response);
            let rule =
                predicted.as_deref().map_or(0, |p| rule_score(p, &instance.gold_answer));
            Ok(InstanceEval {
                instance_id: instance.id.clone(),
                rule,
                judge: None,
                final_score: rule,
                judge_failed: true,
                predicted,
                output_length: traj.len(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Greedy-or-sampled single-rollout accuracy over a dataset.
pub fn evaluate_accuracy(
    codec: &ToyCodec,
    instances: &[Instance],
    params: &PolicyParams,
    sampling: &SamplingConfig,
    judge: &JudgeClient,
    seed: u64,
) -> Result<EvalReport> {
    sampling.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    let records: Vec<InstanceEval> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, instance)| {
            eval_one(codec, instance, params, sampling, judge, seed, &[purpose::EVAL, idx as u64])
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy =
        records.iter().map(|r| f64::from(r.final_score)).sum::<f64>() / records.len() as f64;
    Ok(EvalReport { num_instances: records.len(), accuracy, records })
}

/// Unbiased pass@k over `n` samples with `c` correct: the probability that
/// a uniformly random size-`k` subset contains at least one correct
/// sample, `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("pass@k needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k {k} exceeds the number of samples {n}")));
    }
    if c > n {
        return Err(Error::Config(format!("{c} correct out of {n} samples is impossible")));
    }
    if n - c < k {
        // Every size-k subset must include a correct sample.
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) in product form to avoid large intermediates.
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Pass@k aggregated over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    /// Samples drawn per instance.
    pub num_samples: usize,
    pub num_instances: usize,
    /// `(k, mean pass@k)` pairs, in the requested order.
    pub entries: Vec<(usize, f64)>,
    /// Correct-sample count per instance, aligned with the dataset order.
    pub correct_counts: Vec<usize>,
}

/// Draw `num_samples` rollouts per instance, count rule/judge-correct ones,
/// and average the pass@k estimator over instances for each requested `k`.
pub fn evaluate_pass_at_k(
    codec: &ToyCodec,
    instances: &[Instance],
    params: &PolicyParams,
    sampling: &SamplingConfig,
    judge: &JudgeClient,
    num_samples: usize,
    ks: &[usize],
    seed: u64,
) -> Result<PassAtKReport> {
    sampling.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    if num_samples == 0 {
        return Err(Error::Config("pass@k needs at least one sample per instance".into()));
    }
    if sampling.greedy && num_samples > 1 {
        return Err(Error::Config(
            "greedy decoding repeats one trajectory; pass@k needs stochastic samples".into(),
        ));
    }
    for &k in ks {
        // Surface bad k values before spending time on rollouts.
        pass_at_k(num_samples, 0, k)?;
    }
    let correct_counts: Vec<usize> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, instance)| -> Result<usize> {
            let view = InstanceView::build(codec, instance)?;
            let mut correct = 0usize;
            for s in 0..num_samples {
                let mut rng =
                    rng::stream(seed, &[purpose::EVAL, idx as u64, s as u64]);
                let traj = sample_trajectory_with_rng(params, &view, sampling, &mut rng)?;
                let answer_text = codec.decode(traj.answer_tokens())?;
                let response = render_response(&answer_text);
                let outcome = score_response(
                    &instance.question,
                    &response,
                    &instance.gold_answer,
                    judge,
                )?;
                correct += usize::from(outcome.combined);
            }
            Ok(correct)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut total = 0.0;
        for &c in &correct_counts {
            total += pass_at_k(num_samples, c, k)?;
        }
        entries.push((k, total / correct_counts.len() as f64));
    }
    Ok(PassAtKReport {
        num_samples,
        num_instances: instances.len(),
        entries,
        correct_counts,
    })
}

/// Tabular export format for metrics files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Tsv,
}

impl ExportFormat {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::Config(format!(
                "unknown export format {other:?} (expected csv or tsv)"
            ))),
        }
    }

    fn separator(self) -> char {
        match self {
            Self::Csv => ',',
            Self::Tsv => '\t',
        }
    }
}

const EXPORT_COLUMNS: [&str; 8] = [
    "step",
    "phase",
    "mean_reward",
    "mean_entropy",
    "kl_estimate",
    "gradient_norm",
    "clip_fraction",
    "mean_output_length",
];

/// Convert a metrics JSONL file (one record per line) to a CSV/TSV table
/// with a fixed column set.
pub fn export_metrics(input: &Path, output: &Path, format: ExportFormat) -> Result<usize> {
    let raw = fs::read_to_string(input)?;
    let sep = format.separator();
    let file = fs::File::create(output)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", EXPORT_COLUMNS.join(&sep.to_string()))?;
    let mut rows = 0usize;
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::Data { line: idx + 1, msg: "blank line in metrics file".into() });
        }
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Data {
            line: idx + 1,
            msg: format!("bad metrics record: {e}"),
        })?;
        let fields = [
            record.step.to_string(),
            record.phase.to_string(),
            record.mean_reward.to_string(),
            record.mean_entropy.to_string(),
            record.kl_estimate.to_string(),
            record.gradient_norm.to_string(),
            record.clip_fraction.to_string(),
            record.mean_output_length.to_string(),
        ];
        writeln!(w, "{}", fields.join(&sep.to_string()))?;
        rows += 1;
    }
    w.flush()?;
    Ok(rows)
}

/// Write an evaluation report as pretty-printed JSON.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Write an accuracy report as line-delimited JSON: one record per
/// instance followed by a summary record (the only line without an
/// `instance_id`).
pub fn write_accuracy_report(path: &Path, report: &EvalReport) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for record in &report.records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("serializing record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    let summary = serde_json::json!({
        "num_instances": report.num_instances,
        "accuracy": report.accuracy,
    });
    writeln!(w, "{summary}")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::rewards::{JudgeBackend, JudgeConfig, MockJudge};

    fn setup() -> (ToyCodec, Vec<Instance>) {
        let synth = SynthConfig {
            num_instances: 10,
            num_keys: 4,
            num_values: 4,
            length_range: (5, 11),
            distractor_rate: 0.0,
            seed: 33,
        };
        let instances = generate_synthetic(&synth).unwrap();
        let codec = ToyCodec::for_synth(&synth).unwrap();
        (codec, instances)
    }

    fn saturated(codec: &ToyCodec) -> PolicyParams {
        let mut params = PolicyParams::uniform(codec);
        // End-of-sequence outweighs the still-firing follower feature, so
        // sampled decoding also stops right after the answer token.
        params.weights[1] = 12.0;
        params.weights[4] = 24.0;
        params
    }

    #[test]
    fn test_pass_at_k_closed_form_cases() {
        // 4 samples, 2 correct, k = 2: only the one all-wrong pair misses,
        // so 1 - 1/6.
        assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(pass_at_k(4, 0, 2).unwrap(), 0.0);
        assert_eq!(pass_at_k(4, 4, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(4, 3, 2).unwrap(), 1.0);
        // k = 1 reduces to the plain success rate.
        for n in 1..=10usize {
            for c in 0..=n {
                assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_pass_at_k_matches_subset_enumeration() {
        // Brute force over all size-k subsets of n samples (n <= 8).
        for n in 1..=8usize {
            for c in 0..=n {
                for k in 1..=n {
                    let mut hit = 0usize;
                    let mut subsets = 0usize;
                    for mask in 0u32..(1 << n) {
                        if mask.count_ones() as usize != k {
                            continue;
                        }
                        subsets += 1;
                        // Samples 0..c are the correct ones.
                        if (0..c).any(|i| mask & (1 << i) != 0) {
                            hit += 1;
                        }
                    }
                    let expected = hit as f64 / subsets as f64;
                    let got = pass_at_k(n, c, k).unwrap();
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "n={n} c={c} k={k}: {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn test_pass_at_k_guards() {
        assert!(pass_at_k(4, 0, 0).is_err());
        assert!(pass_at_k(4, 0, 5).is_err());
        assert!(pass_at_k(4, 5, 1).is_err());
    }

    #[test]
    fn test_saturated_policy_scores_perfect_without_judge_calls() {
        let (codec, instances) = setup();
        let params = saturated(&codec);
        let judge = JudgeClient::mock(MockJudge::new());
        let sampling = SamplingConfig { greedy: true, max_output_len: 4, ..Default::default() };
        let report =
            evaluate_accuracy(&codec, &instances, &params, &sampling, &judge, 0).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.num_instances, 10);
        for r in &report.records {
            assert_eq!(r.rule, 1);
            assert_eq!(r.judge, None);
            assert!(!r.judge_failed);
        }
        let JudgeBackend::Mock(mock) = judge.backend() else { unreachable!() };
        assert_eq!(mock.call_count(), 0, "rule-verified answers must skip the judge");
    }

    #[test]
    fn test_unreachable_judge_degrades_to_rule_only() {
        let (codec, instances) = setup();
        let params = PolicyParams::uniform(&codec);
        // A freshly bound-then-dropped port refuses connections.
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let config = JudgeConfig { max_retries: 0, backoff_ms: 1, ..Default::default() };
        let http = crate::rewards::judge::HttpJudge::new(
            &format!("http://127.0.0.1:{port}"),
            "",
            "m",
            &config,
        )
        .unwrap();
        let judge = JudgeClient::new(JudgeBackend::Http(http), &config).unwrap();
        let sampling = SamplingConfig { max_output_len: 3, ..Default::default() };
        let report =
            evaluate_accuracy(&codec, &instances, &params, &sampling, &judge, 5).unwrap();
        assert!(report.records.iter().any(|r| r.judge_failed));
        for r in &report.records {
            assert_eq!(r.final_score, r.rule, "degraded scoring is rule-only");
            assert_eq!(r.judge, None);
        }
    }

    #[test]
    fn test_evaluate_accuracy_deterministic() {
        let (codec, instances) = setup();
        let params = PolicyParams::uniform(&codec);
        let judge = JudgeClient::mock_equality();
        let sampling = SamplingConfig { max_output_len: 3, ..Default::default() };
        let a = evaluate_accuracy(&codec, &instances, &params, &sampling, &judge, 11).unwrap();
        let b = evaluate_accuracy(&codec, &instances, &params, &sampling, &judge, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_evaluate_pass_at_k_monotone_in_k() {
        let (codec, instances) = setup();
        let params = PolicyParams::uniform(&codec);
        let judge = JudgeClient::mock_equality();
        let sampling = SamplingConfig { max_output_len: 3, ..Default::default() };
        let report = evaluate_pass_at_k(
            &codec, &instances, &params, &sampling, &judge, 6, &[1, 2, 4, 6], 17,
        )
        .unwrap();
        assert_eq!(report.num_samples, 6);
        assert_eq!(report.correct_counts.len(), 10);
        let values: Vec<f64> = report.entries.iter().map(|&(_, v)| v).collect();
        for pair in values.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "pass@k must not decrease in k");
        }
        for v in values {
            assert!((0.0..=1.0).contains(&v));
        }
        // Saturated policy: every sample correct, pass@k = 1 for every k.
        let report = evaluate_pass_at_k(
            &codec,
            &instances,
            &saturated(&codec),
            &sampling,
            &judge,
            4,
            &[1, 4],
            17,
        )
        .unwrap();
        for (_, v) in report.entries {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn test_evaluate_pass_at_k_guards() {
        let (codec, instances) = setup();
        let params = PolicyParams::uniform(&codec);
        let judge = JudgeClient::mock_equality();
        let sampling = SamplingConfig { max_output_len: 3, ..Default::default() };
        assert!(evaluate_pass_at_k(
            &codec, &instances, &params, &sampling, &judge, 0, &[1], 0
        )
        .is_err());
        assert!(evaluate_pass_at_k(
            &codec, &instances, &params, &sampling, &judge, 4, &[5], 0
        )
        .is_err());
        let greedy = SamplingConfig { greedy: true, ..Default::default() };
        assert!(evaluate_pass_at_k(
            &codec, &instances, &params, &greedy, &judge, 4, &[1], 0
        )
        .is_err());
    }

    #[test]
    fn test_export_metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("metrics.jsonl");
        let records: Vec<MetricsRecord> = (0..3)
            .map(|step| MetricsRecord {
                step,
                phase: 1,
                mean_reward: 0.5 + step as f64 * 0.1,
                mean_entropy: 1.25,
                kl_estimate: 0.01,
                gradient_norm: 2.5,
                clip_fraction: 0.0,
                mean_output_length: 2.0,
                groups_filtered: 0,
            })
            .collect();
        let lines: Vec<String> =
            records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        fs::write(&input, lines.join("\n") + "\n").unwrap();

        let csv_path = dir.path().join("metrics.csv");
        let rows = export_metrics(&input, &csv_path, ExportFormat::Csv).unwrap();
        assert_eq!(rows, 3);
        let csv = fs::read_to_string(&csv_path).unwrap();
        let mut csv_lines = csv.lines();
        assert_eq!(
            csv_lines.next().unwrap(),
            "step,phase,mean_reward,mean_entropy,kl_estimate,gradient_norm,clip_fraction,mean_output_length"
        );
        assert_eq!(csv_lines.next().unwrap(), "0,1,0.5,1.25,0.01,2.5,0,2");
        assert_eq!(csv.lines().count(), 4);

        let tsv_path = dir.path().join("metrics.tsv");
        export_metrics(&input, &tsv_path, ExportFormat::Tsv).unwrap();
        let tsv = fs::read_to_string(&tsv_path).unwrap();
        assert!(tsv.lines().next().unwrap().contains('\t'));

        assert!(ExportFormat::from_name("parquet").is_err());
        assert_eq!(ExportFormat::from_name("csv").unwrap(), ExportFormat::Csv);

        fs::write(&input, "not json\n").unwrap();
        assert!(matches!(
            export_metrics(&input, &csv_path, ExportFormat::Csv),
            Err(Error::Data { line: 1, .. })
        ));
    }

    #[test]
    fn test_write_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport { num_instances: 0, accuracy: 0.0, records: Vec::new() };
        write_report(&path, &report).unwrap();
        let loaded: EvalReport =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn test_write_accuracy_report_line_delimited() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("accuracy.jsonl");
        let record = |id: &str, score: u8| InstanceEval {
            instance_id: id.to_string(),
            rule: score,
            judge: None,
            final_score: score,
            judge_failed: false,
            predicted: Some("x".to_string()),
            output_length: 3,
        };
        let report = EvalReport {
            num_instances: 2,
            accuracy: 0.5,
            records: vec![record("inst-0", 1), record("inst-1", 0)],
        };
        write_accuracy_report(&path, &report).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for (line, expected) in lines[..2].iter().zip(&report.records) {
            let loaded: InstanceEval = serde_json::from_str(line).unwrap();
            assert_eq!(&loaded, expected);
        }
        let summary: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(summary["num_instances"], 2);
        assert_eq!(summary["accuracy"], 0.5);
        assert!(summary.get("instance_id").is_none());
    }
}
