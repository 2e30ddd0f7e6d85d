//! Writes a synthetic image as PGM, reads it back, crops patches, and
//! stores them as a raw tensor.
//!
//! ```text
//! cargo run --release --example image_io -- /tmp/aelpn-demo
//! ```

use aelpn::data::{self, PatchSource, PatchSpec, PnmEncoding, RawTensor, SyntheticImageSpec};
use aelpn::rng::Rng;

fn main() -> aelpn::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("aelpn-demo").display().to_string());
    std::fs::create_dir_all(&dir).map_err(|e| aelpn::Error::io(&dir, e))?;
    let mut rng = Rng::new(21);
    let img = data::synth_image(&SyntheticImageSpec::new(64), &mut rng)?;
    let pgm = format!("{dir}/synthetic.pgm");
    data::write_pnm(&pgm, &img, PnmEncoding::Binary)?;
    let back = data::load_pnm(&pgm)?;
    let worst = img.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("wrote {pgm} ({}×{}), 8-bit quantization error {worst:.2e}", back.width(), back.height());

    let mut src = PatchSource::new(vec![back], PatchSpec::default())?;
    let patches = src.patches(10, &mut rng);
    let flat: Vec<f64> = patches.concat();
    let tensor = RawTensor::new(vec![10, 256], flat)?;
    let raw = format!("{dir}/patches.aelp");
    data::write_raw_tensor(&raw, &tensor)?;
    println!("wrote {raw}: dims {:?}", data::read_raw_tensor(&raw)?.dims);
    Ok(())
}
