//! Encodes one scene frame with a mixed QP map, then decodes it and reports
//! size and error per QP.

use accgrad::codec::{decode_frame, encode_frame, mask_to_qpmap, CodecConfig, QpMap};
use accgrad::scene::{gen_images, SceneConfig};
use accgrad::QualityMask;

fn main() -> accgrad::Result<()> {
    let frame = gen_images(&SceneConfig::default(), 1, 3).frames.remove(0);
    let (w, h) = frame.grid();
    let cfg = CodecConfig::default();
    println!("qp  bytes  max_err*255  mse");
    for qp in [0u8, 10, 20, 30, 40, 51] {
        let enc = encode_frame(&frame, &QpMap::uniform(w, h, qp)?, &cfg)?;
        let dec = decode_frame(&enc, &cfg)?;
        println!("{qp:>2} {:>6}  {:>10.2}  {:.2e}", enc.size(), frame.max_abs_diff(&dec) * 255.0, frame.mse(&dec));
    }

    let mut mask = QualityMask::empty(w, h);
    mask.set(1, 1, true);
    mask.set(2, 1, true);
    let enc = encode_frame(&frame, &mask_to_qpmap(&mask, 30, 40)?, &cfg)?;
    let dec = decode_frame(&enc, &cfg)?;
    println!("\nRoI 30/40 with blocks (1,1),(2,1) high: {} bytes", enc.size());
    for by in 0..h {
        let row: Vec<String> = (0..w).map(|bx| format!("{:.1e}", frame.block_mse(&dec, bx, by))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
