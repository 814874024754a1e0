use ereformer::depth::{compute_metrics, scale_invariant_value, MetricReport};

/// Standard depth metrics on a few hand-made predictions.
fn main() -> ereformer::Result<()> {
    let gt = [5.0, 15.0, 25.0, 40.0];
    let mask = [true; 4];
    let doubled: Vec<f64> = gt.iter().map(|v| 2.0 * v).collect();
    let noisy = [5.5, 13.0, 27.0, 36.0];

    let perfect = compute_metrics(&gt, &gt, &mask)?;
    let twice = compute_metrics(&doubled, &gt, &mask)?;
    let close = compute_metrics(&noisy, &gt, &mask)?;
    let rows = [
        ("perfect".to_string(), &perfect),
        ("2x".to_string(), &twice),
        ("noisy".to_string(), &close),
    ];
    print!("{}", MetricReport::to_table(&rows));

    // the scale-invariant loss ignores a global factor only at lambda = 1
    let log = |v: &[f64]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
    for lambda in [0.0, 0.85, 1.0] {
        let l = scale_invariant_value(&log(&doubled), &log(&gt), &mask, lambda)?;
        println!("lambda {lambda}: loss of the 2x prediction {l:.5}");
    }
    Ok(())
}
