//! Run-directory artifacts: the per-round CSV log, binary model dumps, and
//! the resolved config echo.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a log
//! read back with [`parse_rounds_csv`] reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::federation::{ArmijoTerm, Outcome, RoundMode, RoundRecord, Stage};
use crate::numkit::ParamVector;
use crate::pipeline::{PipelineRun, StageMetrics};

pub const ROUNDS_HEADER: &str = "round,stage,mode,outcome,eta,step,trials,direction_norm,beta,\
objectives,lambda,losses,asr,racc_mean,racc_std,distance,alignment,armijo,flags";

pub const MODEL_MAGIC: &[u8; 4] = b"FUPM";
pub const MODEL_VERSION: u32 = 1;
pub const MODEL_HEADER_LEN: usize = 16;

pub const CONFIG_FILE: &str = "config.resolved";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const PRETRAIN_FILE: &str = "pretrain.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MODEL_PRE: &str = "model_pre.bin";
pub const MODEL_UNLEARNED: &str = "model_unlearned.bin";
pub const MODEL_FINAL: &str = "model_final.bin";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn format_record(r: &RoundRecord) -> String {
    let armijo = r
        .armijo
        .iter()
        .map(|a| format!("{}:{}:{}:{}", a.label, a.base, a.trial, a.slope))
        .collect::<Vec<_>>()
        .join(";");
    let fields = [
        r.round.to_string(),
        match r.stage {
            Stage::Unlearn => "unlearn".into(),
            Stage::Post => "post".into(),
        },
        r.mode.label().into(),
        r.outcome.label().into(),
        r.eta_base.to_string(),
        opt(r.step),
        r.trials.to_string(),
        r.direction_norm.to_string(),
        r.beta.to_string(),
        r.objectives.join(";"),
        join(&r.lambda),
        join(&r.losses),
        opt(r.asr),
        opt(r.racc_mean),
        opt(r.racc_std),
        r.distance.to_string(),
        opt(r.remaining_alignment),
        armijo,
        r.flags.join(";"),
    ];
    fields.join(",")
}

pub fn format_rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(ROUNDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    out
}

struct LineParser {
    line: usize,
}

impl LineParser {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::BadRoundLog {
            line: self.line,
            detail: detail.into(),
        }
    }

    fn float(&self, s: &str) -> Result<f64> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn opt(&self, s: &str) -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            self.float(s).map(Some)
        }
    }

    fn list(&self, s: &str) -> Result<Vec<f64>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(';').map(|v| self.float(v)).collect()
    }

    fn words(s: &str) -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split(';').map(String::from).collect()
        }
    }
}

fn parse_outcome(s: &str) -> Option<Outcome> {
    [
        Outcome::Accepted,
        Outcome::Rejected,
        Outcome::Stationary,
        Outcome::DeadEnd,
        Outcome::Skipped,
        Outcome::Fixed,
    ]
    .into_iter()
    .find(|o| o.label() == s)
}

fn parse_mode(s: &str) -> Option<RoundMode> {
    [RoundMode::Improvement, RoundMode::Expansion, RoundMode::PostTrain]
        .into_iter()
        .find(|m| m.label() == s)
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROUNDS_HEADER => {}
        _ => {
            return Err(Error::BadRoundLog {
                line: 1,
                detail: "unexpected header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let p = LineParser { line: i + 2 };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            return Err(p.err(format!("expected 19 fields, found {}", f.len())));
        }
        let armijo = if f[17].is_empty() {
            Vec::new()
        } else {
            f[17]
                .split(';')
                .map(|entry| {
                    let parts: Vec<&str> = entry.split(':').collect();
                    if parts.len() != 4 {
                        return Err(p.err(format!("bad armijo entry `{entry}`")));
                    }
                    Ok(ArmijoTerm {
                        label: parts[0].into(),
                        base: p.float(parts[1])?,
                        trial: p.float(parts[2])?,
                        slope: p.float(parts[3])?,
                    })
                })
                .collect::<Result<_>>()?
        };
        out.push(RoundRecord {
            round: f[0].parse().map_err(|_| p.err("bad round index"))?,
            stage: match f[1] {
                "unlearn" => Stage::Unlearn,
                "post" => Stage::Post,
                other => return Err(p.err(format!("bad stage `{other}`"))),
            },
            mode: parse_mode(f[2]).ok_or_else(|| p.err("bad mode"))?,
            outcome: parse_outcome(f[3]).ok_or_else(|| p.err("bad outcome"))?,
            eta_base: p.float(f[4])?,
            step: p.opt(f[5])?,
            trials: f[6].parse().map_err(|_| p.err("bad trial count"))?,
            direction_norm: p.float(f[7])?,
            beta: p.float(f[8])?,
            objectives: LineParser::words(f[9]),
            lambda: p.list(f[10])?,
            losses: p.list(f[11])?,
            asr: p.opt(f[12])?,
            racc_mean: p.opt(f[13])?,
            racc_std: p.opt(f[14])?,
            distance: p.float(f[15])?,
            remaining_alignment: p.opt(f[16])?,
            armijo,
            flags: LineParser::words(f[18]),
        });
    }
    Ok(out)
}

pub fn encode_model(w: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(MODEL_HEADER_LEN + 8 * w.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for v in w.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    let bad = |detail: String| Error::BadModelFile {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < MODEL_HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(bad("missing FUPM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[MODEL_HEADER_LEN..];
    if body.len() != n.checked_mul(8).ok_or_else(|| bad("parameter count overflows".into()))? {
        return Err(bad(format!("header declares {n} values, body holds {} bytes", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParamVector::new(values))
}

pub fn write_model(path: &Path, w: &ParamVector) -> Result<()> {
    fs::write(path, encode_model(w))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ParamVector> {
    decode_model(&fs::read(path)?, path)
}

fn metrics_text(m: &StageMetrics) -> String {
    let asr = m.asr.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    let mia = m.mia_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "asr={asr} racc={:.4}+-{:.4} mia_auc={mia}",
        m.racc_mean, m.racc_std
    )
}

/// One-line human summary, labeled with the variant.
pub fn summary_line(run: &PipelineRun, wall_seconds: f64) -> String {
    let metrics = run
        .final_metrics
        .as_ref()
        .or(run.unlearned_metrics.as_ref())
        .or(run.pre_metrics.as_ref());
    let body = metrics.map_or("no metrics".to_string(), metrics_text);
    format!("variant={} {body} wall={wall_seconds:.2}s", run.variant)
}

/// Writes every artifact the run produced. Partial runs still get their log.
pub fn write_run_dir(dir: &Path, resolved_config: &str, run: &PipelineRun, wall_seconds: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(CONFIG_FILE, resolved_config.as_bytes())?;
    put(ROUNDS_FILE, format_rounds_csv(&run.records).as_bytes())?;
    if !run.pretrain_losses.is_empty() {
        let mut csv = String::from("round,loss\n");
        for (i, l) in run.pretrain_losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        put(PRETRAIN_FILE, csv.as_bytes())?;
    }
    for (name, model) in [
        (MODEL_PRE, &run.model_pre),
        (MODEL_UNLEARNED, &run.model_unlearned),
        (MODEL_FINAL, &run.model_final),
    ] {
        if let Some(w) = model {
            put(name, &encode_model(w))?;
        }
    }
    let mut summary = Vec::new();
    for (label, m) in [
        ("pretrained", &run.pre_metrics),
        ("unlearned", &run.unlearned_metrics),
        ("final", &run.final_metrics),
    ] {
        if let Some(m) = m {
            writeln!(summary, "{label}: {}", metrics_text(m))?;
        }
    }
    if let Some(reason) = &run.unlearn_stop {
        writeln!(summary, "unlearning stopped early: {reason}")?;
    }
    if let Some(e) = &run.error {
        writeln!(summary, "aborted: {e}")?;
    }
    writeln!(summary, "{}", summary_line(run, wall_seconds))?;
    put(SUMMARY_FILE, &summary)?;
    Ok(written)
}
