//! Verify every differentiable op, and their composition through the full
//! velocity network, against central finite differences.

use echoflow::autodiff::check_all_ops;
use echoflow::model::full_network_gradcheck;

fn main() {
    let start = std::time::Instant::now();
    let mut max: f64 = 0.0;
    for c in check_all_ops(0).unwrap() {
        println!(
            "{:<22} rel err {:>9.3e}  ({} coords)",
            c.name, c.report.max_rel_err, c.report.checked
        );
        max = max.max(c.report.max_rel_err);
    }

    let net = full_network_gradcheck(0).unwrap();
    println!(
        "{:<22} rel err {:>9.3e}  ({} coords, one per parameter tensor pair)",
        "full_network", net.max_rel_err, net.checked
    );
    max = max.max(net.max_rel_err);

    println!(
        "\nmax relative error {max:.3e} in {:.1}s  (tolerance 1e-4)",
        start.elapsed().as_secs_f64()
    );
    assert!(max < 1e-4);
}
