use mamba_peft::experiment::*;
use mamba_peft::mamba::{ClsPosition, MambaConfig};
use mamba_peft::peft::PeftSpec;
use mamba_peft::train::tasks::{TaskKind, TaskSpec};
use mamba_peft::train::TrainingConfig;

fn model() -> MambaConfig {
    MambaConfig {
        d_model: 32, expand: 2, d_state: 4, dt_rank: 2, d_conv: 4,
        n_layers: 2, vocab_size: 4, n_classes: 4,
        use_cls_token: false, cls_position: ClsPosition::Middle, use_pos_embed: true,
        max_seq_len: 32,
    }
}

fn task(kind: TaskKind, train: usize, seed: u64) -> TaskSpec {
    TaskSpec { kind, vocab: 4, seq_len: 16, n_classes: 4, train_size: train, val_size: 256, seed }
}

fn training(epochs: usize, lr: f64, seed: u64) -> TrainingConfig {
    TrainingConfig { epochs, batch_size: 32, base_lr: lr, weight_decay: 1e-4, warmup_frac: 0.1, seed, train_head: true }
}

#[test]
fn probe_suite() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("pre.mpk");
    let pre_cfg = ExperimentConfig {
        model: model(),
        task: task(TaskKind::MajorityToken, 512, 100),
        training: training(8, 5e-3, 7),
        mode: FinetuneMode::Peft, peft: vec![], search: None,
    };
    let pre = cmd_pretrain(&pre_cfg, &ck).unwrap();
    let pre_val = pre.history.iter().rev().find(|m| m.split == "val").unwrap().acc;
    println!("base val {pre_val:.3}");

    let variants: Vec<(&str, PeftSpec, usize)> = vec![
        ("r8 lr2e-3", PeftSpec::partial_lora("x", 8, 0.1).with_lr(2e-3), 20),
        ("r8 lr2e-3 24ep", PeftSpec::partial_lora("x", 8, 0.1).with_lr(2e-3), 24),
        ("r8 s02 lr2e-3", PeftSpec::partial_lora("x", 8, 0.2).with_lr(2e-3), 20),
        ("r16 base-lr", PeftSpec::partial_lora("x", 16, 0.1), 20),
        ("r8 24ep", PeftSpec::partial_lora("x", 8, 0.1), 24),
    ];
    for (name, spec, ep) in variants {
        let mut wins = 0;
        let (mut p, mut l, mut rows) = (vec![], vec![], vec![]);
        for seed in 0..5u64 {
            let dcfg = |mode: FinetuneMode, peft: Vec<PeftSpec>| ExperimentConfig {
                model: model(),
                task: task(TaskKind::ShiftedMajority, 256, 300 + seed),
                training: training(ep, 5e-3, seed),
                mode, peft, search: None,
            };
            let probe = cmd_finetune(&dcfg(FinetuneMode::LinearProbe, vec![]), &ck, None).unwrap().final_val_acc;
            let lora = cmd_finetune(&dcfg(FinetuneMode::Peft, vec![spec.clone()]), &ck, None).unwrap().final_val_acc;
            if lora >= probe { wins += 1; }
            p.push(probe); l.push(lora);
            rows.push(format!("{probe:.2}/{lora:.2}"));
        }
        p.sort_by(f64::total_cmp); l.sort_by(f64::total_cmp);
        println!("{name}: probe med {:.3} lora med {:.3} wins {wins}/5 | {rows:?}", p[2], l[2]);
    }
}
