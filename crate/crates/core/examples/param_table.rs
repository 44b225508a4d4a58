//! Prints per-submodule parameter counts for the three construction modes.

use hft::harness::{additivity_residual, param_table};
use hft::net::{ModelConfig, SUBMODULES};
use hft::synthworld::{default_grid, default_intrinsics};

fn main() -> hft::Result<()> {
    let table = param_table(&ModelConfig::default(), &default_grid(), &default_intrinsics())?;
    print!("{:<10}", "");
    for (mode, _) in &table {
        print!("{:>12}", mode.name());
    }
    println!();
    for name in SUBMODULES {
        print!("{name:<10}");
        for (_, count) in &table {
            print!("{:>12}", count.get(name));
        }
        println!();
    }
    print!("{:<10}", "total");
    for (_, count) in &table {
        print!("{:>12}", count.total);
    }
    println!("\nadditivity residual {}", additivity_residual(&table)?);
    Ok(())
}
