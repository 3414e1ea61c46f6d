//! HSV <-> RGB conversion on the unit cube (hue in turns, [0, 1)).

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max <= 0.0 { 0.0 } else { d / max };
    if d <= 1e-12 {
        return (0.0, s, v);
    }
    let h = if (max - r).abs() < 1e-12 {
        ((g - b) / d).rem_euclid(6.0)
    } else if (max - g).abs() < 1e-12 {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, v)
}

/// Distance on the hue circle, in turns (max 0.5).
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for &(h, s, v) in &[(0.0, 0.5, 0.5), (0.25, 0.8, 0.9), (11.0 / 12.0, 0.4, 0.3)] {
            let (r, g, b) = hsv_to_rgb(h, s, v);
            let (h2, s2, v2) = rgb_to_hsv(r, g, b);
            assert!(hue_distance(h, h2) < 1e-9, "{h} vs {h2}");
            assert!((s - s2).abs() < 1e-9);
            assert!((v - v2).abs() < 1e-9);
        }
    }

    #[test]
    fn gray_has_zero_saturation() {
        let (_, s, v) = rgb_to_hsv(0.5, 0.5, 0.5);
        assert_eq!(s, 0.0);
        assert!((v - 0.5).abs() < 1e-12);
    }
}
