mod common;

use common::{theta, SUNSTAR, URCHIN};
use zicp::inference::McemConfig;
use zicp::model::{simulate_hierarchy, Design};
use zicp::studies::{
    bias_study, bias_table, coverage_table, gof_histogram, ppplot_data, run_replicates, write_bias_csv,
    write_coverage_csv, StudyGrid,
};
use zicp::{Kind, RngStream};

fn grid(s_values: Vec<usize>, m_values: Vec<usize>, replicates: usize, truth: [f64; 4]) -> StudyGrid {
    StudyGrid {
        s_values,
        m_values,
        replicates,
        theta_true: theta(truth),
        levels: vec![0.9],
        seed: 1,
        kind: Kind::Continuous,
        effort: 1.0,
        mcem: McemConfig::default(),
    }
}

#[test]
fn bias_shrinks_with_the_number_of_strata() {
    let cells = bias_study(&grid(vec![9, 225], vec![15], 20, SUNSTAR)).unwrap();
    let (small, large) = (&cells[0], &cells[1]);
    assert_eq!((small.s, large.s), (9, 225));
    for k in 0..4 {
        assert!(
            large.relative_bias[k].abs() <= small.relative_bias[k].abs(),
            "component {k}: {:?} vs {:?}",
            large.relative_bias,
            small.relative_bias
        );
    }
}

#[test]
fn bias_and_coverage_share_replicates_and_totals_are_consistent() {
    let mut g = grid(vec![9, 16], vec![5], 6, URCHIN);
    g.levels = vec![0.9, 0.99];
    let outcomes = run_replicates(&g).unwrap();
    let bias = bias_table(&g, &outcomes);
    let coverage = coverage_table(&g, &outcomes);
    assert_eq!(bias.len(), 2);
    assert_eq!(coverage.len(), 4);
    for c in &coverage {
        assert!(c.n_covered <= c.n_converged && c.n_converged <= c.replicates);
        assert!(c.interval_covered.iter().all(|&n| n <= c.n_converged));
    }
    for pair in coverage.chunks(2) {
        assert!(pair[1].n_covered >= pair[0].n_covered);
    }
    // the same datasets come back on a second run
    assert_eq!(run_replicates(&g).unwrap(), outcomes);
    let one = g.replicate_dataset(9, 5, 3).unwrap();
    assert_eq!(one, g.replicate_dataset(9, 5, 3).unwrap());

    let mut csv = Vec::new();
    write_bias_csv(&bias, &mut csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(reader.records().count(), 2);
    let mut csv = Vec::new();
    write_coverage_csv(&coverage, &mut csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_slice());
    assert_eq!(reader.records().count(), 4);
}

#[test]
fn single_replicate_tables_are_well_formed() {
    let g = grid(vec![9], vec![10], 1, SUNSTAR);
    let outcomes = run_replicates(&g).unwrap();
    let bias = bias_table(&g, &outcomes);
    assert_eq!(bias[0].replicates, 1);
    assert!(bias[0].n_converged <= 1);
}

#[test]
fn zero_count_envelope_is_calibrated() {
    let truth = theta(SUNSTAR);
    let design = Design::uniform(36, 15, 1.0);
    let inside = (0..100)
        .filter(|&seed| {
            let (data, _) = simulate_hierarchy(&truth, &design, Kind::Continuous, &mut RngStream::new(seed, 3)).unwrap();
            gof_histogram(&data, &truth, 200, 10, seed).unwrap().zero_inside_envelope()
        })
        .count();
    assert!(inside >= 85, "{inside}/100");
}

#[test]
fn histogram_bins_cover_the_data() {
    let (data, _) = simulate_hierarchy(&theta(SUNSTAR), &Design::uniform(10, 8, 1.0), Kind::Continuous, &mut RngStream::new(2, 0))
        .unwrap();
    let h = gof_histogram(&data, &theta(SUNSTAR), 1, 12, 0).unwrap();
    assert_eq!(h.observed.iter().sum::<u64>() as usize, data.n_observations());
    assert_eq!(*h.observed.last().unwrap(), 0);
    // one replicate: the envelope collapses onto the simulated histogram
    assert_eq!(h.simulated_q05, h.simulated_q95);
    assert_eq!(h.simulated_mean, h.simulated_q05);
}

#[test]
fn pp_pairs_follow_the_diagonal() {
    let truth = theta(SUNSTAR);
    let mut devs: Vec<f64> = (0..11)
        .map(|seed| {
            let (data, _) =
                simulate_hierarchy(&truth, &Design::uniform(38, 15, 1.0), Kind::Continuous, &mut RngStream::new(seed, 0))
                    .unwrap();
            ppplot_data(&data).unwrap().max_deviation()
        })
        .collect();
    devs.sort_by(f64::total_cmp);
    assert!(devs[5] < 0.15, "{devs:?}");
}
