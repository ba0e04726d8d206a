//! Runs the three studies with default settings and prints every table.

use std::time::Instant;

use sheaf_sysid::experiments::*;

fn main() -> sheaf_sysid::Result<()> {
    let t = Instant::now();
    let f = run_formation_transfer(&ExperimentConfig::new(ExperimentId::FormationTransfer))?;
    let rows: Vec<FormationRow> = f.into_iter().map(|r| r.row).collect();
    println!("{}({:.2?})\n", formation_table(&rows).to_text(), t.elapsed());

    let t = Instant::now();
    let bc = run_bounded_confidence(&ExperimentConfig::new(ExperimentId::BoundedConfidence))?;
    println!("{}({:.2?})\n", threshold_table(&bc).to_text(), t.elapsed());

    let t = Instant::now();
    let fb = run_finite_basis(&ExperimentConfig::new(ExperimentId::FiniteBasis))?;
    println!("{}({:.2?})\n", basis_table(&fb).to_text(), t.elapsed());
    println!("{}", force_check_table(&bc, &fb).to_text());
    Ok(())
}
