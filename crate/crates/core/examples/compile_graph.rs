//! Compile the human-object activity st-graph into its unit architecture,
//! print the wiring and write a DOT rendering.
//!
//! cargo run --example compile_graph [-- out.dot]

use srnn::arch::{compile, count_parameters, export_dot, validate};
use srnn::stgraph::{derive_factor_graph, partition_edges};
use srnn::tasks::{activity_graph, activity_specs};

fn main() -> srnn::Result<()> {
    let g = activity_graph(2, 8, 6, false)?;
    for p in partition_edges(&g) {
        println!(
            "partition {:<26} {} edges, {} features",
            p.key.to_string(),
            p.members.len(),
            p.feature_dim
        );
    }

    let fg = derive_factor_graph(&g);
    let arch = compile(&fg, &g, &activity_specs())?;
    println!("\n{} factors -> {} units", fg.factor_count(), arch.units().count());
    for u in arch.units() {
        println!(
            "  {:<26} {:<22} in {:>4} out {:?}",
            u.factor.to_string(),
            u.arch_string(),
            u.input_dim,
            u.output_dims
        );
    }
    println!("wiring:");
    for (e, n) in &arch.wiring {
        println!("  {e} -> {n}");
    }
    println!("parameters: {}", count_parameters(&arch)?);
    assert!(validate(&arch, &fg, &g).is_empty());

    // one more object changes nothing about the parameters
    let bigger = activity_graph(5, 8, 6, false)?;
    let arch5 = compile(&derive_factor_graph(&bigger), &bigger, &activity_specs())?;
    println!("with 5 objects: {} parameters", count_parameters(&arch5)?);

    if let Some(path) = std::env::args().nth(1) {
        srnn::io::write_file(path.as_ref(), export_dot(&arch))?;
        println!("wrote {path}");
    }
    Ok(())
}
