use diffoseg::evaluate::{score_consensus, score_experts};
use diffoseg_core::synth::{default_styles, generate_dataset};
use diffoseg_core::{Mask, MultiRaterSample};

fn data() -> Vec<MultiRaterSample> {
    generate_dataset(6, 24, 24, 4, &default_styles(4), 9).unwrap()
}

fn truth(s: &MultiRaterSample) -> Vec<Mask> {
    (0..s.experts()).map(|e| s.mask(e)).collect()
}

#[test]
fn replaying_the_annotations_scores_perfectly() {
    let samples = data();
    let images: Vec<&MultiRaterSample> = samples.iter().collect();
    let preds: Vec<Vec<Mask>> = samples.iter().map(truth).collect();
    let report = score_consensus(&images, &preds, &[4]).unwrap();
    assert_eq!(report.mean_ged, [0.0]);
    assert!((report.mean_dice_soft[0] - 1.0).abs() < 1e-12);

    let per_expert: Vec<Vec<Vec<Mask>>> =
        (0..4).map(|e| samples.iter().map(|s| vec![s.mask(e); 2]).collect()).collect();
    let report = score_experts(&images, &per_expert).unwrap();
    assert!(report.mean_dice.iter().all(|&d| d == 1.0));
    assert_eq!(report.d_mean, 1.0);
    // Nested styles: broader experts have larger areas.
    assert!(report.mean_area.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn csv_layout() {
    let samples = data();
    let images: Vec<&MultiRaterSample> = samples.iter().collect();
    let preds: Vec<Vec<Mask>> = samples.iter().map(truth).collect();
    let csv = score_consensus(&images, &preds, &[2, 4]).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,GED_2,GED_4,Dsoft_2,Dsoft_4");
    assert_eq!(lines.len(), samples.len() + 2);
    assert!(lines.last().unwrap().starts_with("mean,"));
    assert!(lines[1].split(',').skip(1).all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 6)));

    let per_expert: Vec<Vec<Vec<Mask>>> =
        (0..4).map(|e| samples.iter().map(|s| vec![s.mask(e)]).collect()).collect();
    let csv = score_experts(&images, &per_expert).unwrap().to_csv();
    assert_eq!(
        csv.lines().next().unwrap(),
        "id,D_A1,D_A2,D_A3,D_A4,D_mean,area_A1,area_A2,area_A3,area_A4"
    );
}

#[test]
fn too_few_predictions_are_rejected() {
    let samples = data();
    let images: Vec<&MultiRaterSample> = samples.iter().collect();
    let preds: Vec<Vec<Mask>> = samples.iter().map(truth).collect();
    assert!(score_consensus(&images, &preds, &[5]).is_err());
}
