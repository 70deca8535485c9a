//! The MP-vs-FS comparison sweep: every (architecture, initialization,
//! train size, seed) combination is trained and evaluated on the
//! synthetic benchmark, producing one CSV row per run and a scatter plot.
//! Pretraining checkpoints are produced once per (architecture, seed) and
//! cached in the output directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{nested_splits, synth_generate, SamplePair};
use crate::eval::evaluate_model;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::RunConfig;
use crate::pipeline::train::{finetune_seg, pretrain_mr, Init, TrainError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepCell {
    pub arch: String,
    pub init: String,
    pub train_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub images_presented: usize,
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// CSV with the fixed schema
/// `arch,init,train_size,seed,images_presented,auc_pr,auc_roc,status`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("arch,init,train_size,seed,images_presented,auc_pr,auc_roc,status\n");
    for r in rows {
        let status = r.status.replace([',', '\n'], ";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.cell.arch,
            r.cell.init,
            r.cell.train_size,
            r.cell.seed,
            r.images_presented,
            r.auc_pr,
            r.auc_roc,
            status
        ));
    }
    out
}

/// Deterministic synthetic pools shared by every sweep cell. The
/// pretraining pool mirrors a 29-healthy / 30-pathological mix; the
/// segmentation pool mirrors a 13 / 7 mix.
pub fn sweep_pools(cfg: &RunConfig) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let size = (cfg.compare.image_size, cfg.compare.image_size);
    let n_pre = cfg.compare.pretrain_pool;
    let healthy_pre = n_pre * 29 / 59;
    let pretrain: Vec<SamplePair> = (0..n_pre)
        .map(|i| {
            let level = if i < healthy_pre {
                0.0
            } else {
                cfg.compare.pathology
            };
            synth_generate(10_000 + i as u64, size, level)
        })
        .collect();
    let n_seg = cfg.compare.seg_pool;
    let healthy_seg = n_seg * 13 / 20;
    let seg: Vec<SamplePair> = (0..n_seg)
        .map(|i| {
            let level = if i < healthy_seg {
                0.0
            } else {
                cfg.compare.pathology
            };
            synth_generate(20_000 + i as u64, size, level)
        })
        .collect();
    (pretrain, seg)
}

fn run_jobs<'a, T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + 'a>>, threads: usize) -> Vec<T> {
    let n = jobs.len();
    let queue: Vec<Mutex<Option<Box<dyn FnOnce() -> T + Send + 'a>>>> =
        jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = queue[i].lock().unwrap().take().unwrap();
                *results[i].lock().unwrap() = Some(job());
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().unwrap())
        .collect()
}

/// Train and evaluate every grid combination. Returns the ordered rows;
/// also writes `sweep.csv` and `curves.svg` into `out_dir`. Failed cells
/// are recorded in their row's status and do not abort the sweep.
pub fn run_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    threads: usize,
    progress: &(dyn Fn(String) + Sync),
) -> Result<SweepResult, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|source| {
        TrainError::Data(crate::data::DataError::Io {
            path: out_dir.to_path_buf(),
            source,
        })
    })?;
    let (pretrain_pool, seg_pool) = sweep_pools(cfg);
    let pretrain_pool = &pretrain_pool;
    let seg_pool = &seg_pool;

    // Phase 1: one pretraining per (arch, seed) needed by MP cells.
    let mut pretrain_keys: Vec<(String, u64)> = Vec::new();
    if cfg.compare.modes.iter().any(|m| m == "mp") {
        for arch in &cfg.compare.archs {
            for &seed in &cfg.compare.seeds {
                pretrain_keys.push((arch.clone(), seed));
            }
        }
    }
    let ckpt_path =
        |arch: &str, seed: u64| -> PathBuf { out_dir.join(format!("pretrain_{arch}_s{seed}.ckpt")) };

    type PretrainJob<'a> = Box<dyn FnOnce() -> ((String, u64), Result<(), String>) + Send + 'a>;
    let jobs: Vec<PretrainJob> = pretrain_keys
        .iter()
        .cloned()
        .map(|(arch, seed)| {
            let cfg = cfg.clone();
            let path = ckpt_path(&arch, seed);
            let job: PretrainJob = Box::new(move || {
                if path.exists() {
                    return ((arch, seed), Ok(()));
                }
                let mut cell_cfg = cfg.clone();
                cell_cfg.arch = arch.clone();
                cell_cfg.seed = seed;
                progress(format!("pretraining {arch} seed {seed}"));
                let result = (|| -> Result<(), String> {
                    let mut model =
                        crate::arch::build_by_tag::<f32>(&arch, cell_cfg.base_channels)
                            .map_err(|e| e.to_string())?;
                    model.init_he(crate::pipeline::train::derive_seed(
                        seed,
                        crate::pipeline::config::Phase::Pretrain,
                        0,
                        7,
                    ));
                    let outcome = pretrain_mr(&mut model, pretrain_pool, &cell_cfg, None)
                        .map_err(|e| e.to_string())?;
                    outcome.best.save(&path).map_err(|e| e.to_string())
                })();
                ((arch, seed), result)
            });
            job
        })
        .collect();
    let pretrain_status: Vec<((String, u64), Result<(), String>)> = run_jobs(jobs, threads);
    for ((arch, seed), st) in &pretrain_status {
        match st {
            Ok(()) => progress(format!("pretrain {arch} seed {seed}: ready")),
            Err(e) => progress(format!("pretrain {arch} seed {seed}: FAILED: {e}")),
        }
    }

    // Phase 2: the grid, in deterministic order.
    let mut cells = Vec::new();
    for arch in &cfg.compare.archs {
        for init in &cfg.compare.modes {
            for &size in &cfg.compare.sizes {
                for &seed in &cfg.compare.seeds {
                    cells.push(SweepCell {
                        arch: arch.clone(),
                        init: init.clone(),
                        train_size: size,
                        seed,
                    });
                }
            }
        }
    }

    type CellJob<'a> = Box<dyn FnOnce() -> SweepRow + Send + 'a>;
    let jobs: Vec<CellJob> = cells
        .iter()
        .cloned()
        .map(|cell| {
            let cfg = cfg.clone();
            let pretrain_err = pretrain_status
                .iter()
                .find(|((a, s), _)| *a == cell.arch && *s == cell.seed)
                .and_then(|(_, st)| st.as_ref().err().cloned());
            let path = ckpt_path(&cell.arch, cell.seed);
            let job: CellJob = Box::new(move || {
                let mut cell_cfg = cfg.clone();
                cell_cfg.arch = cell.arch.clone();
                cell_cfg.seed = cell.seed;
                let result = (|| -> Result<(usize, f64, f64), String> {
                    let init_ckpt = if cell.init == "mp" {
                        if let Some(e) = &pretrain_err {
                            return Err(format!("pretraining failed: {e}"));
                        }
                        Some(Checkpoint::load(&path).map_err(|e| e.to_string())?)
                    } else {
                        None
                    };
                    let init = match &init_ckpt {
                        Some(ck) => Init::Checkpoint(ck),
                        None => Init::Scratch,
                    };
                    let (mut model, outcome) =
                        finetune_seg(init, seg_pool, cell.train_size, &cell_cfg)
                            .map_err(|e| e.to_string())?;
                    // Evaluate the best checkpoint, not the final state.
                    crate::pipeline::checkpoint::transfer(&outcome.best, &mut model)
                        .map_err(|e| e.to_string())?;
                    let split =
                        nested_splits(seg_pool.len(), &[cell.train_size], cell.seed)
                            .map_err(|e| e.to_string())?
                            .remove(0);
                    let val: Vec<&SamplePair> =
                        split.val.iter().map(|&i| &seg_pool[i]).collect();
                    let id = format!(
                        "{}-{}-n{}-s{}",
                        cell.arch, cell.init, cell.train_size, cell.seed
                    );
                    let report =
                        evaluate_model(&mut model, &val, outcome.images_presented, &id)
                            .map_err(|e| e.to_string())?;
                    Ok((
                        outcome.images_presented,
                        report.pooled.auc_pr,
                        report.pooled.auc_roc,
                    ))
                })();
                match result {
                    Ok((images, auc_pr, auc_roc)) => SweepRow {
                        cell,
                        images_presented: images,
                        auc_pr,
                        auc_roc,
                        status: "ok".into(),
                    },
                    Err(e) => SweepRow {
                        cell,
                        images_presented: 0,
                        auc_pr: f64::NAN,
                        auc_roc: f64::NAN,
                        status: e,
                    },
                }
            });
            job
        })
        .collect();
    let rows = run_jobs(jobs, threads);
    for r in &rows {
        progress(format!(
            "{} {} n{} s{}: images {} auc_pr {:.4} [{}]",
            r.cell.arch,
            r.cell.init,
            r.cell.train_size,
            r.cell.seed,
            r.images_presented,
            r.auc_pr,
            if r.status == "ok" { "ok" } else { &r.status }
        ));
    }

    let csv = sweep_csv(&rows);
    std::fs::write(out_dir.join("sweep.csv"), csv).map_err(|source| {
        TrainError::Data(crate::data::DataError::Io {
            path: out_dir.join("sweep.csv"),
            source,
        })
    })?;
    let svg = crate::eval::svg::sweep_scatter_svg(&rows, "synthetic benchmark");
    std::fs::write(out_dir.join("curves.svg"), svg).map_err(|source| {
        TrainError::Data(crate::data::DataError::Io {
            path: out_dir.join("curves.svg"),
            source,
        })
    })?;
    Ok(SweepResult { rows })
}
