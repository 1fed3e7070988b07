//! The `ablate` command: one axis of method variants over shared seeds.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use pppc_core::checkpoint::write_atomic;
use pppc_core::config::ExperimentConfig;
use pppc_core::train::{Datasets, TrainState};

use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, prepare_output_dir, RunManifest, Status};
use crate::output_root;
use crate::train::{steps_csv, trace_csv, RunSummary};

/// Monte-Carlo draws per anchor–prototype pair for the JS member.
pub const JS_SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Similarity,
    Cropping,
    LossTerms,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Similarity => "similarity",
            Axis::Cropping => "cropping",
            Axis::LossTerms => "loss-terms",
        })
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "similarity" => Ok(Axis::Similarity),
            "cropping" => Ok(Axis::Cropping),
            "loss-terms" => Ok(Axis::LossTerms),
            _ => Err(CliError::usage(format!(
                "unknown axis `{s}`; expected similarity, cropping or loss-terms"
            ))),
        }
    }
}

/// One row of an ablation: a name and the overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub name: String,
    pub overrides: Vec<String>,
}

fn member(name: &str, overrides: &[&str]) -> Member {
    Member {
        name: name.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

/// Members of an axis; the first is the base that deltas refer to.
pub fn members(axis: Axis) -> Vec<Member> {
    match axis {
        Axis::LossTerms => vec![
            member(
                "ssl",
                &["loss.lambda_c=0", "loss.lambda_kl=0", "crop.strategy=\"random\""],
            ),
            member("ssl+cl", &["loss.lambda_kl=0", "crop.strategy=\"random\""]),
            member("ssl+cl+kl", &["crop.strategy=\"random\""]),
            member("ssl+cl+kl+agc", &["crop.strategy=\"agc\""]),
        ],
        Axis::Cropping => vec![
            member("random", &["crop.strategy=\"random\""]),
            member("cbc", &["crop.strategy=\"cbc\""]),
            member("agc_constant", &["crop.strategy=\"rcs\""]),
            member("agc", &["crop.strategy=\"agc\""]),
        ],
        Axis::Similarity => {
            let mut v = vec![member("elk", &["loss.similarity=\"elk\""])];
            for j in [10, 20, 30, 40, 50] {
                let name = format!("mc_cosine:{j}");
                v.push(Member {
                    name: name.clone(),
                    overrides: vec![format!("loss.similarity=\"{name}\"")],
                });
            }
            v.push(member("kl", &["loss.similarity=\"kl\""]));
            v.push(Member {
                name: format!("js_mc:{JS_SAMPLES}"),
                overrides: vec![format!("loss.similarity=\"js_mc:{JS_SAMPLES}\"")],
            });
            v.push(member("wasserstein2", &["loss.similarity=\"wasserstein2\""]));
            v.push(member("bk", &["loss.similarity=\"bk\""]));
            v
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub axis: Axis,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seeds: Vec<u64>,
    /// Members to run; all when empty.
    pub only: Vec<String>,
    pub jobs: usize,
    pub force: bool,
    pub out: Option<PathBuf>,
}

impl AblateArgs {
    pub fn new(axis: Axis) -> Self {
        Self {
            axis,
            config: None,
            overrides: Vec::new(),
            seeds: (1..=5).collect(),
            only: Vec::new(),
            jobs: 1,
            force: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemberRun {
    pub method: String,
    pub seed: u64,
    pub secs: f64,
    /// `Err` holds the failure message.
    pub result: Result<RunSummary, String>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    /// Mean final target mIoU over the seeds that completed.
    pub miou: Option<f64>,
    pub delta: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub axis: Axis,
    pub dir: PathBuf,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<MemberRun>,
    pub secs: f64,
}

impl AblationReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed > 0)
    }

    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn runs_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a MemberRun> + 'a {
        self.runs.iter().filter(move |r| r.method == method)
    }
}

fn file_stem(method: &str, seed: u64) -> String {
    let safe: String = method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{safe}_seed{seed}")
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x))
        .unwrap_or_else(|| "failed".into())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,miou,delta_vs_base,completed,failed\n");
    for r in rows {
        let delta = match r.delta {
            Some(d) => format!("{:+.2}", 100.0 * d),
            None if r.miou.is_some() => "-".into(),
            None => "failed".into(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method,
            fmt_pct(r.miou),
            delta,
            r.completed,
            r.failed
        );
    }
    s
}

pub fn runs_csv(runs: &[MemberRun]) -> String {
    let mut s = String::from(
        "method,seed,status,target_miou,source_miou,entropy_correct,entropy_incorrect,norm_var_spearman,secs\n",
    );
    let o = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in runs {
        match &r.result {
            Ok(sum) => {
                let _ = writeln!(
                    s,
                    "{},{},ok,{},{},{},{},{},{:.1}",
                    r.method,
                    r.seed,
                    o(sum.target_miou),
                    o(sum.source_miou),
                    o(sum.entropy_correct),
                    o(sum.entropy_incorrect),
                    o(sum.norm_var_spearman),
                    r.secs
                );
            }
            Err(e) => {
                let _ = writeln!(
                    s,
                    "{},{},\"failed: {}\",,,,,,{:.1}",
                    r.method,
                    r.seed,
                    e.replace('"', "'"),
                    r.secs
                );
            }
        }
    }
    s
}

fn run_member(cfg: ExperimentConfig) -> Result<TrainState, String> {
    let data = Datasets::generate(&cfg).map_err(|e| e.to_string())?;
    let state = TrainState::new(cfg, &data).map_err(|e| e.to_string())?;
    let total = state.config.schedule.total_iters;
    state.run_until(&data, total).map_err(|f| f.to_string())
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<AblationReport> {
    if args.seeds.is_empty() {
        return Err(CliError::usage("at least one seed is required"));
    }
    let mut chosen = members(args.axis);
    if !args.only.is_empty() {
        if let Some(bad) = args.only.iter().find(|o| !chosen.iter().any(|m| &m.name == *o)) {
            return Err(CliError::usage(format!("axis {} has no member `{bad}`", args.axis)));
        }
        chosen.retain(|m| args.only.contains(&m.name));
    }
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let base_text = base.to_toml()?;
    // Resolve every member config before any run starts so that a bad
    // override is a usage error, not a failed row.
    let mut tasks = Vec::new();
    for m in &chosen {
        for &seed in &args.seeds {
            let mut ov = m.overrides.clone();
            ov.push(format!("seed={seed}"));
            tasks.push((
                m.name.clone(),
                seed,
                ExperimentConfig::from_toml_with_overrides(&base_text, &ov)?,
            ));
        }
    }

    let dir = match &args.out {
        Some(d) => d.clone(),
        None => output_root().join(format!("ablate-{}-{}", args.axis, &base.hash()?[..12])),
    };
    prepare_output_dir(&dir, args.force)?;
    std::fs::create_dir_all(dir.join("traces"))?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(&format!("ablate {}", args.axis), &base, &dir, &["runs", "tables"])?;
    manifest.set_stage("runs", Status::Running, None);
    manifest.write()?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<MemberRun>>> = Mutex::new(vec![None; tasks.len()]);
    let write_errors: Mutex<Vec<String>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((method, seed, cfg)) = tasks.get(i) else {
                    break;
                };
                let t = Instant::now();
                let classes = cfg.classes();
                let out = run_member(cfg.clone());
                let secs = t.elapsed().as_secs_f64();
                let stem = file_stem(method, *seed);
                if let Ok(state) = &out {
                    let written = trace_csv(classes, &state.trace).and_then(|bytes| {
                        write_atomic(&dir.join("traces").join(format!("{stem}_trace.csv")), &bytes)?;
                        write_atomic(
                            &dir.join("traces").join(format!("{stem}_steps.csv")),
                            steps_csv(&state.log).as_bytes(),
                        )?;
                        Ok(())
                    });
                    if let Err(e) = written {
                        write_errors.lock().expect("lock").push(e.message);
                    }
                }
                match &out {
                    Ok(s) => log::info!(
                        "{method} seed {seed}: target mIoU {:.4} ({secs:.0}s)",
                        RunSummary::of(s).target_miou.unwrap_or(f64::NAN)
                    ),
                    Err(e) => log::warn!("{method} seed {seed} failed: {e}"),
                }
                results.lock().expect("lock")[i] = Some(MemberRun {
                    method: method.clone(),
                    seed: *seed,
                    secs,
                    result: out.map(|s| RunSummary::of(&s)),
                });
            });
        }
    });
    if let Some(e) = write_errors.into_inner().expect("lock").into_iter().next() {
        return Err(CliError::failure(e));
    }
    let runs: Vec<MemberRun> = results
        .into_inner()
        .expect("lock")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect();

    let mut rows: Vec<AblationRow> = chosen
        .iter()
        .map(|m| {
            let mine: Vec<&MemberRun> = runs.iter().filter(|r| r.method == m.name).collect();
            let ok: Vec<f64> = mine
                .iter()
                .filter_map(|r| r.result.as_ref().ok().and_then(|s| s.target_miou))
                .collect();
            let failed = mine.len() - ok.len();
            AblationRow {
                method: m.name.clone(),
                miou: (failed == 0 && !ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                delta: None,
                completed: ok.len(),
                failed,
            }
        })
        .collect();
    let base_miou = rows.first().and_then(|r| r.miou);
    for r in rows.iter_mut().skip(1) {
        if let (Some(b), Some(m)) = (base_miou, r.miou) {
            r.delta = Some(m - b);
        }
    }

    manifest.set_stage("runs", Status::Completed, None);
    write_atomic(&dir.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    manifest.add_output("ablation.csv");
    write_atomic(&dir.join("runs.csv"), runs_csv(&runs).as_bytes())?;
    manifest.add_output("runs.csv");
    for r in runs.iter().filter(|r| r.result.is_ok()) {
        let stem = file_stem(&r.method, r.seed);
        manifest.add_output(&format!("traces/{stem}_trace.csv"));
        manifest.add_output(&format!("traces/{stem}_steps.csv"));
    }
    let failed = rows.iter().any(|r| r.failed > 0);
    manifest.set_stage("tables", Status::Completed, None);
    manifest.status = if failed { Status::Failed } else { Status::Completed };
    let secs = started.elapsed().as_secs_f64();
    manifest.wall_clock_secs = Some(secs);
    manifest.write()?;
    Ok(AblationReport {
        axis: args.axis,
        dir,
        rows,
        runs,
        secs,
    })
}
