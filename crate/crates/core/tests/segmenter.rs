use polystain::evalkit::{segment_glands, train_gland_segmenter, InputKind, SegConfig};
use polystain::synthdata::{generate_dataset, Marker, TissueSpec};

#[test]
fn default_segmenters_reach_held_out_dice_and_ignore_background() {
    let records = generate_dataset(&TissueSpec::default(), 300, 41).unwrap();
    let negatives: Vec<_> = records.iter().filter(|r| r.is_negative).take(10).collect();
    assert!(!negatives.is_empty());
    for kind in [InputKind::Stain, InputKind::InputHe] {
        let model = train_gland_segmenter(&records, kind, &SegConfig::default()).unwrap();
        let d = model.meta().held_out_dice.unwrap();
        assert!(d >= 0.85, "{kind:?} held-out dice {d}");
        for r in &negatives {
            let tile = match kind {
                InputKind::Stain => r.target(Marker::Cyto).unwrap(),
                InputKind::InputHe => &r.input_tile,
            };
            let f = segment_glands(&model, tile).unwrap().pixels.fraction();
            assert!(f < 0.01, "{kind:?} on background tile {}: {f}", r.seed);
        }
    }
}
