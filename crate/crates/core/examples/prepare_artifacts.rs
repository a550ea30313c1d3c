//! Build the cached artifacts used by the acceptance suite ahead of time.

#[path = "../tests/common/mod.rs"]
mod common;

use mcm::modulation::L1Weight;

fn main() {
    let base = common::base_checkpoint();
    println!("base: {}", base.display());
    let mcm = common::mcm_checkpoint("mcm", &common::mcm_train_config());
    println!("mcm: {}", mcm.display());
    for (name, l1) in [("ablation_l1", L1Weight::Auto), ("ablation_nol1", L1Weight::Fixed(0.0))] {
        let path = common::mcm_checkpoint(name, &common::ablation_config(l1));
        println!("{name}: {}", path.display());
    }
}
