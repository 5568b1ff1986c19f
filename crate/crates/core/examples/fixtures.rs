//! Writes synthetic style and content images for trying the CLI.
//!
//! `cargo run -p stylebank-core --example fixtures -- <dir> [family] [n] [px]`

use std::path::PathBuf;

use stylebank_core::image::write_ppm;
use stylebank_core::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().ok_or("usage: fixtures <dir> [family] [n] [px]")?);
    let family: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let n: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let px: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);
    let styles = dir.join("styles");
    std::fs::create_dir_all(&styles)?;
    for v in 0..n {
        write_ppm(&synth::style_image(family, v, px, px), &styles.join(format!("style{v}.ppm")))?;
    }
    write_ppm(&synth::content_image(family, px, px), &dir.join("content.ppm"))?;
    println!("wrote {n} style images and content.ppm to {}", dir.display());
    Ok(())
}
