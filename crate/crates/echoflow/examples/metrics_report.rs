//! Score a predicted mask sequence against a reference: Dice, Hausdorff,
//! ejection fraction, shape attributes, and temporal-consistency flags.
//!
//! The "prediction" here is the ground truth shifted by one pixel on two
//! frames, so every metric shows a readable, nonzero response.

use echoflow::field::LabelMask;
use echoflow::metrics::{sequence_report, ATTRIBUTE_NAMES, LV_ENDO};
use echoflow::phantom::{generate_phantom, PhantomConfig};

fn shift_right(m: &LabelMask) -> LabelMask {
    let mut labels = vec![0u8; m.h * m.w];
    for y in 0..m.h {
        for x in 1..m.w {
            labels[y * m.w + x] = m.labels[y * m.w + x - 1];
        }
    }
    LabelMask::new(labels, m.h, m.w)
}

fn main() {
    let truth = generate_phantom(&PhantomConfig::default()).unwrap();
    let mut pred = truth.masks.clone();
    pred[3] = shift_right(&pred[3]);
    pred[7] = shift_right(&pred[7]);

    let report = sequence_report(&pred, &truth.masks, Some(0.3), 0.15).unwrap();

    println!("per-class mean Dice: {:?}", report.mean_dice);
    println!("frame Dice (LV):     {:?}", report.dice[&LV_ENDO]);
    println!(
        "temporal HD: {:.3} px = {:.3} mm",
        report.temporal_hd_px,
        report.temporal_hd_mm.unwrap()
    );
    println!(
        "EF predicted {:.4} vs reference {:.4} (|err| {:.4})",
        report.ef_predicted, report.ef_reference, report.ef_abs_error
    );

    println!("\nattribute flags at tau=0.15 (true = inconsistent with its own series):");
    for name in ATTRIBUTE_NAMES {
        let flags = &report.attribute_flags[name];
        let hits: Vec<usize> =
            flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
        println!("  {name:<22} {hits:?}");
    }
    println!("sequence flagged: {}", report.temporal_error);

    // The report serializes; this is what `echoflow eval` writes.
    let json = serde_json::to_string_pretty(&report).unwrap();
    println!("\nreport JSON is {} bytes", json.len());
}
