use diffoseg_core::synth::{default_styles, generate_dataset, ExpertStyle, MAX_CONNECTED_SMOOTHING};

fn components(mask: &[u8], h: usize, w: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if mask[q] == 1 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
    }
    count
}

#[test]
fn zero_jitter_masks_are_nested() {
    let styles: Vec<ExpertStyle> = [2.0, 1.0, -1.0, -2.0]
        .iter()
        .map(|&o| ExpertStyle::new(o, 0.0, 0.75))
        .collect();
    let data = generate_dataset(60, 32, 32, 4, &styles, 99).unwrap();
    for s in &data {
        for i in 1..4 {
            for (inner, outer) in s.annotations[i].iter().zip(&s.annotations[i - 1]) {
                assert!(inner <= outer, "sample {} expert {i}", s.id);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let styles = default_styles(4);
    let a = generate_dataset(5, 32, 32, 4, &styles, 7).unwrap();
    let b = generate_dataset(5, 32, 32, 4, &styles, 7).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(5, 32, 32, 4, &styles, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn default_masks_are_single_components_with_sane_area() {
    let styles = default_styles(4);
    assert!(styles.iter().all(|s| s.smoothing <= MAX_CONNECTED_SMOOTHING));
    let data = generate_dataset(300, 32, 32, 4, &styles, 1).unwrap();
    let mut fg = 0.0;
    for s in &data {
        for m in &s.annotations {
            assert_eq!(components(m, 32, 32), 1, "sample {}", s.id);
            fg += m.iter().map(|&v| v as f64).sum::<f64>() / 1024.0;
        }
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let mean = fg / (300.0 * 4.0);
    assert!((0.05..=0.5).contains(&mean), "foreground fraction {mean}");
}

#[test]
fn experts_disagree_on_a_boundary_band() {
    let data = generate_dataset(50, 32, 32, 4, &default_styles(4), 3).unwrap();
    for s in &data {
        let band = (0..1024)
            .filter(|&p| {
                let votes: u8 = s.annotations.iter().map(|m| m[p]).sum();
                votes > 0 && votes < 4
            })
            .count();
        assert!(band > 0, "sample {}", s.id);
    }
}
