use fundus_core::eval::{evaluate_model, sweep::sweep_pools};
use fundus_core::pipeline::train::derive_seed;
use fundus_core::pipeline::{finetune_seg, pretrain_mr, transfer, Init, Phase, RunConfig};
use fundus_core::data::nested_splits;
use fundus_core::data::SamplePair;
use std::time::Instant;

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.arch = "unet".into();
    cfg.base_channels = 8;
    cfg.batch_size = 4;
    cfg.lr_patience_epochs = 10;
    cfg.pretrain_stop_epochs = 12;
    cfg.finetune_stop_images = 1000;
    cfg.alpha = 3e-4;
    cfg.max_epochs = Some(80);
    cfg.compare.image_size = 64;
    cfg
}

#[test]
fn calibrate() {
    let cfg = tiny_cfg();
    let (pre_pool, seg_pool) = sweep_pools(&cfg);
    let t0 = Instant::now();
    let mut model = fundus_core::arch::build_unet::<f32>(8, 4);
    model.init_he(derive_seed(0, Phase::Pretrain, 0, 7));
    let mut pcfg = cfg.clone();
    pcfg.seed = 0;
    let outcome = pretrain_mr(&mut model, &pre_pool, &pcfg, None).unwrap();
    println!(
        "pretrain: {:.1}s, epochs {}, best val {:.2}, images {}",
        t0.elapsed().as_secs_f64(),
        outcome.epochs_run,
        outcome.best_val_loss,
        outcome.images_presented
    );
    let pre_ckpt = outcome.best;

    let mut fcfg = cfg.clone();
    fcfg.max_epochs = None;
    for size in [1usize, 15] {
        for init_name in ["fs", "mp"] {
            let t0 = Instant::now();
            let mut c = fcfg.clone();
            c.seed = 0;
            let init = if init_name == "mp" {
                Init::Checkpoint(&pre_ckpt)
            } else {
                Init::Scratch
            };
            let (mut m, out) = finetune_seg(init, &seg_pool, size, &c).unwrap();
            transfer(&out.best, &mut m).unwrap();
            let split = nested_splits(seg_pool.len(), &[size], 0).unwrap().remove(0);
            let val: Vec<&SamplePair> = split.val.iter().map(|&i| &seg_pool[i]).collect();
            let rep = evaluate_model(&mut m, &val, out.images_presented, "x").unwrap();
            println!(
                "finetune {init_name} n{size}: {:.1}s, epochs {}, images {}, best val {:.2}, auc_pr {:.4}, auc_roc {:.4}",
                t0.elapsed().as_secs_f64(),
                out.epochs_run,
                out.images_presented,
                out.best_val_loss,
                rep.pooled.auc_pr,
                rep.pooled.auc_roc
            );
        }
    }
}
