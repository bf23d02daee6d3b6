use fogflow::eval::{color_wheel, flow_to_color};
use fogflow::FlowField;

/// The classic 8-bit wheel table: segment lengths and integer ramps.
fn reference_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    let mut w = Vec::new();
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w.into_iter().map(|c| c.map(|v| v / 255.0)).collect()
}

/// Color of one flow vector, straight from the reference procedure.
fn reference_color(u: f64, v: f64, max_mag: f64) -> [f64; 3] {
    let wheel = reference_wheel();
    let n = wheel.len();
    let rad = u.hypot(v) / max_mag;
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = fk.floor() as usize;
    let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    [0, 1, 2].map(|c| {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        }
    })
}

fn hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    (3f64.sqrt() * (g - b)).atan2(2.0 * r - g - b).to_degrees().rem_euclid(360.0)
}

#[test]
fn wheel_matches_the_reference_table() {
    let ours = color_wheel();
    let reference = reference_wheel();
    assert_eq!(ours.len(), reference.len());
    for (a, b) in ours.iter().zip(&reference) {
        for c in 0..3 {
            assert!((a[c] as f64 - b[c]).abs() <= 1.0 / 255.0);
        }
    }
}

#[test]
fn eight_directions_get_eight_reference_hues() {
    let dirs: Vec<(f64, f64)> = (0..8)
        .map(|k| {
            let t = k as f64 * std::f64::consts::FRAC_PI_4;
            (3.0 * t.cos(), 3.0 * t.sin())
        })
        .collect();
    let flow = FlowField::from_fn(1, 8, |_, x| [dirs[x].0 as f32, dirs[x].1 as f32]).unwrap();
    let img = flow_to_color(&flow, Some(4.0));
    let mut hues = Vec::new();
    for (x, &(u, v)) in dirs.iter().enumerate() {
        let got = img.get(0, x).map(|c| c as f64);
        let want = reference_color(u as f32 as f64, v as f32 as f64, 4.0);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() <= 1.0 / 255.0 + 1e-6, "direction {x}: {got:?} vs {want:?}");
        }
        hues.push(hue(got));
    }
    hues.sort_by(f64::total_cmp);
    for pair in hues.windows(2) {
        assert!(pair[1] - pair[0] > 5.0, "hues too close: {hues:?}");
    }
}

#[test]
fn scaling_keeps_hue_and_changes_saturation() {
    let flow = FlowField::from_fn(1, 3, |_, x| [[1.0, -1.0, 0.3][x], [0.5, 0.7, -1.0][x]]).unwrap();
    let doubled = FlowField::new(1, 3, flow.data().iter().map(|v| v * 2.0).collect()).unwrap();
    let (a, b) = (flow_to_color(&flow, Some(5.0)), flow_to_color(&doubled, Some(5.0)));
    for x in 0..3 {
        let (p, q) = (a.get(0, x).map(|c| c as f64), b.get(0, x).map(|c| c as f64));
        assert!((hue(p) - hue(q)).abs() < 0.5, "{p:?} vs {q:?}");
        let sat = |c: [f64; 3]| 1.0 - c.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(sat(q) > sat(p));
    }
}
