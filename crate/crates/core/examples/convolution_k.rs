//! Smallest `K` with `(b*b)_p <= b_p` for `b_n = 1{n >= K} C e^{-gamma n^upsilon}`.

use quenched::coupling::min_convolution_k;

fn main() -> quenched::Result<()> {
    for upsilon in [0.3, 0.5, 0.8, 1.0] {
        for gamma in [0.5, 2.0] {
            let k = min_convolution_k(1.0, gamma, upsilon, 1000, 100_000)?;
            println!(
                "gamma {gamma:3} upsilon {upsilon:3}: K = {:4}, worst log ratio {:.3}, K - 1 fails at p = {:?}",
                k.k, k.worst_log_ratio, k.witness
            );
        }
    }
    Ok(())
}
