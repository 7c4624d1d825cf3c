use steerlab::eval::{emit_plots, emit_scatter, MetricsRecord};
use steerlab::datasets::{default_ring_spec, sample_ring_mixture};
use steerlab::steering::IntegrationMode;

fn record(mode: IntegrationMode, n: usize, epoch: usize, seed: u64, accuracy: f64) -> MetricsRecord {
    MetricsRecord {
        run_id: format!("{}-n{n}-s{seed}-e{epoch}", mode.name()),
        mode,
        n_labeled: n,
        epoch,
        seed,
        target: 1,
        accuracy,
        precision: accuracy,
        band: 0.1,
        wall_time_s: 0.0,
    }
}

/// Contents of every `<text>` element.
fn texts(svg: &str) -> Vec<String> {
    svg.split("<text")
        .skip(1)
        .filter_map(|chunk| {
            let body = &chunk[chunk.find('>')? + 1..];
            Some(body[..body.find("</text>")?].trim().to_string())
        })
        .collect()
}

#[test]
fn single_record_gives_single_curve_file() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plots(&[record(IntegrationMode::Emd, 12, 100, 0, 0.5)], dir.path()).unwrap();
    assert_eq!(files, vec![dir.path().join("accuracy_vs_epoch_n12.svg")]);
    let svg = std::fs::read_to_string(&files[0]).unwrap();
    assert!(svg.contains("<svg"));
    assert_eq!(svg.matches("<circle").count(), 1);
}

#[test]
fn legend_names_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![record(IntegrationMode::Em, 12, 10, 0, 0.4), record(IntegrationMode::EdOnly, 12, 10, 0, 0.6)];
    let files = emit_plots(&recs, dir.path()).unwrap();
    let svg = std::fs::read_to_string(&files[0]).unwrap();
    assert!(texts(&svg).contains(&"EM".to_string()), "legend lacks EM");
    assert!(texts(&svg).contains(&"E-D".to_string()), "legend lacks E-D");
}

#[test]
fn nine_mode_sweep_file_names() {
    let dir = tempfile::tempdir().unwrap();
    let ns = [12, 25, 100, 400];
    let mut recs = Vec::new();
    for mode in IntegrationMode::ALL_MODES {
        for &n in &ns {
            for seed in 0..2 {
                for epoch in [500, 2500] {
                    recs.push(record(mode, n, epoch, seed, 0.5));
                }
            }
        }
    }
    let mut expected: Vec<_> = ns.iter().map(|n| dir.path().join(format!("accuracy_vs_epoch_n{n}.svg"))).collect();
    expected.push(dir.path().join("accuracy_vs_n.svg"));
    let files = emit_plots(&recs, dir.path()).unwrap();
    assert_eq!(files, expected);
    let svg = std::fs::read_to_string(&files[0]).unwrap();
    for mode in IntegrationMode::ALL_MODES {
        assert!(texts(&svg).contains(&mode.name().to_string()), "legend lacks {}", mode.name());
    }
}

#[test]
fn plots_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let recs = vec![record(IntegrationMode::M, 25, 10, 0, 0.3), record(IntegrationMode::M, 25, 20, 0, 0.7)];
    let fa = emit_plots(&recs, a.path()).unwrap();
    let fb = emit_plots(&recs, b.path()).unwrap();
    assert_eq!(std::fs::read(&fa[0]).unwrap(), std::fs::read(&fb[0]).unwrap());
}

#[test]
fn empty_records_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_plots(&[], dir.path()).is_err());
}

#[test]
fn scatter_plot_written() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_ring_spec();
    let data = sample_ring_mixture(&spec, 200, 0).unwrap();
    let path = dir.path().join("samples.svg");
    emit_scatter(data.points.view(), &spec, "rings", &path).unwrap();
    let svg = std::fs::read_to_string(&path).unwrap();
    assert_eq!(svg.matches("<circle").count(), 200);
}
