//! Writes the two-trajectory synthetic demo dataset together with its
//! scripted VLM fixture, so the full pipeline can be exercised offline:
//!
//! ```text
//! cargo run -p autofocus-core --example demo_dataset -- demo
//! cargo run -p autofocus-cli -- run --dataset demo/dataset --out demo/out \
//!     --mock-vlm demo/mock_vlm.json --detections detections.json
//! ```

use std::path::PathBuf;

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("demo"));
    std::fs::create_dir_all(&root).expect("creating output directory");
    let golden = autofocus_core::synthetic::write_golden_dataset(&root).expect("writing dataset");
    println!("dataset:      {}", golden.dataset_dir.display());
    println!("mock fixture: {}", golden.mock_path.display());
    println!(
        "run: autofocus run --dataset {} --out {} --mock-vlm {} --detections {}",
        golden.dataset_dir.display(),
        root.join("out").display(),
        golden.mock_path.display(),
        golden.detections_name
    );
}
