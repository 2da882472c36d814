//! Pretrains on a synthetic source domain, adapts to its shifted copy and
//! prints target mIoU before and after.

use lidarmix::toy::{generate, toy_train_config, ShiftSpec, ToyConfig};
use lidarmix::{adapt, evaluate, pretrain, AdaptData, ModelParamsF32};

fn main() -> lidarmix::Result<()> {
    let pair = generate(&ToyConfig::new(100, 2048, ShiftSpec::combo(), 0))?;
    let cfg = toy_train_config();

    let source_only: ModelParamsF32 = pretrain(&pair.source, &pair.classes, &cfg)?.params;
    let before = evaluate(&source_only, &pair.target_val, &pair.classes)?.iou();

    let target = pair.target.unlabeled();
    let data = AdaptData {
        classes: &pair.classes,
        source: &pair.source,
        target: &target,
        target_labeled: None,
        validation: Some(&pair.target_val),
    };
    let out = adapt(&source_only, &data, &cfg, &mut ())?;
    let after = evaluate(&out.student, &pair.target_val, &pair.classes)?.iou();

    println!("source only:\n{}", before.to_table(&pair.classes));
    println!("adapted:\n{}", after.to_table(&pair.classes));
    Ok(())
}
