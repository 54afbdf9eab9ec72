//! Finite-difference gradient checks for every block and loss, in 64-bit
//! and in single precision against the 64-bit reference.

use ucyclemlp::oracle::{block_suite, loss_suite, BLOCK_TOLERANCE, SINGLE_TOLERANCE};

fn main() -> ucyclemlp::Result<()> {
    let wide = [block_suite::<f64>(0)?, loss_suite::<f64>(0)?].concat();
    let single = [block_suite::<f32>(0)?, loss_suite::<f32>(0)?].concat();
    println!("{:<22}{:>12}{:>12}", "check", "f64", "f32");
    for (a, b) in wide.iter().zip(&single) {
        println!("{:<22}{:>12.2e}{:>12.2e}", a.name, a.worst, b.worst);
    }
    let ok = wide.iter().all(|r| r.passed(BLOCK_TOLERANCE)) && single.iter().all(|r| r.passed(SINGLE_TOLERANCE));
    println!("{}", if ok { "all within tolerance" } else { "FAILED" });
    Ok(())
}
