// Reverse Cuthill-McKee on the element graph of the 2D mesh with a hole,
// and the band mask it induces for the banded trial families.

use pdevi::config::{ExperimentConfig, Kind};
use pdevi::experiment::build_mesh;
use pdevi::graph::{build_adjacency, reverse_cuthill_mckee, sparsity_pattern, BandProfile};

fn main() -> pdevi::Result<()> {
    let cfg = ExperimentConfig::defaults(Kind::Poisson2d);
    let mesh = build_mesh(&cfg)?;
    println!("{} triangles, {} nodes", mesh.num_elements(), mesh.num_nodes());

    for order in 1..=2 {
        let g = build_adjacency(&mesh, order)?;
        let natural = BandProfile::identity(&g);
        let rcm = reverse_cuthill_mckee(&g);
        println!(
            "order {order}: {} edges, bandwidth {} natural -> {} after RCM, mask {} -> {} entries",
            g.num_edges(),
            natural.bandwidth,
            rcm.bandwidth,
            sparsity_pattern(&natural).count(),
            sparsity_pattern(&rcm).count(),
        );
    }
    Ok(())
}
