//! Finite-difference checks of every op and of small end-to-end models.

use msattn::verify::{full_suite, negative_control};

fn main() -> msattn::Result<()> {
    let t = std::time::Instant::now();
    let checks = full_suite(0)?;
    for c in &checks {
        println!("{:<4} {:<26} {:.2e}", if c.passed() { "ok" } else { "FAIL" }, c.name, c.max_rel_err);
    }
    let bad = negative_control(0)?;
    println!("wrong backward rule flagged: {}", !bad.passed());
    println!("{} checks in {:.1}s", checks.len(), t.elapsed().as_secs_f64());
    Ok(())
}
