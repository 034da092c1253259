use ldit::attention::{inference_fast, AttentionInstance};
use ldit::bench::{dim_rule, gamma_rule, time_median};
use std::time::Duration;
fn main() {
    for l in [2048usize, 8192] {
        let d = dim_rule(l);
        let inst = AttentionInstance::random_bounded(d, l, gamma_rule(0.03, l), 0).unwrap();
        let t = Duration::from_millis(300);
        let fp = time_median(|| inst.feature_pair().unwrap(), t, 7, 1);
        let hv = time_median(|| inst.values().unwrap(), t, 7, 1);
        let all = time_median(|| inference_fast(&inst, 1e-3).unwrap(), t, 7, 1);
        println!("{l}: feature_pair {:.0}us values {:.0}us total {:.0}us", fp / 1e3, hv / 1e3, all / 1e3);
    }
}
