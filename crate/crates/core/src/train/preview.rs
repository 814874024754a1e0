//! Colorized depth previews as binary PPM.

/// Maps depth to RGB on a log scale: near is warm, far is cool. Invalid or
/// out-of-range values saturate at the ends.
pub fn colorize(depth: &[f32], near: f64, far: f64) -> Vec<[u8; 3]> {
    let (ln, lf) = (near.ln(), far.ln());
    depth
        .iter()
        .map(|&d| {
            let d = f64::from(d);
            let t = if d.is_finite() && d > 0.0 { ((d.ln() - ln) / (lf - ln)).clamp(0.0, 1.0) } else { 1.0 };
            let ramp = |c: f64| (255.0 * (1.0 - (4.0 * (t - c)).abs()).clamp(0.0, 1.0)).round() as u8;
            [ramp(0.25), ramp(0.5), ramp(0.75)].map(|v| v.max(if t < 0.25 { 64 } else { 0 }))
        })
        .collect()
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}
