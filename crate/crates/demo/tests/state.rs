use rdseg_demo::{DemoState, SCENE_SIZE, TIME_STEPS};

#[test]
fn buffers_have_rgba_size() {
    let s = DemoState::new(1).unwrap();
    let n = 4 * SCENE_SIZE * SCENE_SIZE;
    assert_eq!(s.image_rgba().len(), n);
    assert_eq!(s.labels_rgba().len(), n);
    assert_eq!(s.prediction_rgba(), vec![0; n]);
    for t in 0..=TIME_STEPS {
        assert_eq!(s.noised_rgba(t, 3).unwrap().len(), n);
    }
    assert!(s.noised_rgba(TIME_STEPS + 1, 3).is_err());
}

#[test]
fn zero_noise_shows_the_label_colors() {
    let s = DemoState::new(2).unwrap();
    assert_eq!(s.noised_rgba(0, 9).unwrap(), s.labels_rgba());
    assert_ne!(s.noised_rgba(TIME_STEPS, 9).unwrap(), s.labels_rgba());
}

#[test]
fn training_lowers_loss_and_segments() {
    let mut s = DemoState::new(3).unwrap();
    let first = s.train_epoch().unwrap();
    let mut last = first;
    for _ in 0..5 {
        last = s.train_epoch().unwrap();
    }
    assert_eq!(s.epochs(), 6);
    assert!(last < first, "first {first} last {last}");
    let miou = s.segment(2, 1).unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_ne!(s.prediction_rgba(), vec![0; 4 * SCENE_SIZE * SCENE_SIZE]);
    s.new_scene(5).unwrap();
    assert_eq!(s.prediction_rgba(), vec![0; 4 * SCENE_SIZE * SCENE_SIZE]);
    assert!(s.segment(0, 1).is_err());
}
