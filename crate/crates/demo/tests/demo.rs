use homodiv_demo::{icad_at_noise, planted_inversion, rank, CandidateScores};

#[test]
fn planted_tokens_come_back() {
    let r = planted_inversion(1, 64, 600).unwrap();
    assert_eq!(r.planted.len(), 3);
    assert_eq!(r.losses.len(), 600);
    assert!(r.recovered >= 2, "{r:?}");
    assert!(planted_inversion(1, 4, 10).is_err());
}

#[test]
fn lambda_moves_on_topic_candidates_up() {
    let c = |p: &str, div, sim| CandidateScores { prompt: p.into(), div, sim };
    let pool = [c("novel", 0.30, 0.10), c("close", 0.20, 0.90), c("copy", 0.0, 1.0)];
    let order = |l| rank(&pool, l).into_iter().map(|r| r.prompt).collect::<Vec<_>>();
    assert_eq!(order(0.0), ["novel", "close", "copy"]);
    assert_eq!(order(1.0), ["close", "copy", "novel"]);
    let ranked = rank(&pool, 0.1);
    assert_eq!((ranked[0].rank, ranked[0].prompt.as_str()), (0, "novel"));
    assert!((ranked[0].score - 0.31).abs() < 1e-12);
    assert!((ranked[1].score - 0.29).abs() < 1e-12);
}

#[test]
fn noise_sweep_tracks_expectation() {
    assert_eq!(icad_at_noise("a portrait of a doctor", 0.0, 10, 0).unwrap().icad, 0.0);
    for noise in [0.3, 0.6] {
        let p = icad_at_noise("a portrait of a doctor", noise, 20, 0).unwrap();
        assert!((p.icad - p.predicted).abs() < 0.03, "{p:?}");
    }
    assert!(icad_at_noise("x", 0.3, 1, 0).is_err());
}
