use terradiff_core::data::probe::blur_response;
use terradiff_core::data::synthetic::{render_scene, SyntheticSceneSpec, ALL_CLASSES, BLUR_SIGMAS};
use terradiff_core::MetadataRecord;

fn main() {
    for bucket in 0..4usize {
        let gsds = [[0.1, 1.2, 2.4], [2.6, 3.7, 4.9], [5.1, 6.2, 7.4], [7.6, 8.8, 10.0]][bucket];
        let (mut r01, mut r15): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for &gsd in &gsds {
            for class_i in 0..8 {
                for seed in 0..20u64 {
                    let md = MetadataRecord {
                        lon: (seed as f64 * 17.0) % 360.0 - 180.0,
                        lat: (seed as f64 * 11.0) % 120.0 - 60.0,
                        gsd,
                        cloud_cover: if seed % 3 == 0 { 0.2 } else { 0.0 },
                        year: 2015.0,
                        month: 1.0 + (seed % 12) as f64,
                        day: 10.0,
                    };
                    let spec = SyntheticSceneSpec { seed: seed * 997 + class_i as u64 * 31 + (gsd*10.0) as u64, metadata: md, class: ALL_CLASSES[class_i] };
                    let scene = render_scene(&spec, 64);
                    let e = blur_response(&scene.rgb);
                    r01.push(e[0] / e[1]);
                    r15.push(e[1] / e[3]);
                }
            }
        }
        let mm = |v: &mut Vec<f64>| { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); (v[0], v[v.len()-1]) };
        let (a0, a1) = mm(&mut r01);
        let (b0, b1) = mm(&mut r15);
        println!("bucket {bucket} (sigma {}): r01 [{a0:.3}, {a1:.3}]  r15 [{b0:.3}, {b1:.3}]", BLUR_SIGMAS[bucket]);
    }
}
