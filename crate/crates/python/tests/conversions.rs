use acttransfer::synth_data::CorpusConfig;
use acttransfer_py::{matrix_from_nested, matrix_to_nested, schedule_params, video_from_nested, video_to_nested};

#[test]
fn video_lists_round_trip() {
    let v = CorpusConfig::default().sample_item(7, 3).unwrap().render(32, 32).unwrap();
    let nested = video_to_nested(&v);
    assert_eq!((nested.len(), nested[0].len(), nested[0][0].len()), (8, 32, 32));
    assert_eq!(video_from_nested(&nested).unwrap(), v);
}

#[test]
fn ragged_inputs_are_rejected() {
    let mut nested = vec![vec![vec![vec![0.0; 3]; 2]; 2]; 1];
    nested[0][1].pop();
    assert!(video_from_nested(&nested).is_err());
    assert!(matrix_from_nested(&vec![vec![1.0, 2.0], vec![3.0]]).is_err());
}

#[test]
fn matrices_round_trip() {
    let m = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    assert_eq!(matrix_to_nested(&matrix_from_nested(&m).unwrap()), m);
}

#[test]
fn transition_names_parse() {
    assert!(schedule_params(1.0, 800.0, 700.0, "step-at-high").is_ok());
    assert!(schedule_params(1.0, 800.0, 700.0, "linear").is_err());
    assert!(schedule_params(1.0, 600.0, 700.0, "cosine").is_err());
}
