use ewwa_core::data::{blob_center, partition_iid, partition_label_skew, synth_blobs, Dataset};
use ewwa_core::model::{init_params, ModelSpec};

fn global_share(data: &Dataset) -> Vec<f64> {
    let n = data.len() as f64;
    data.class_histogram().iter().map(|&c| c as f64 / n).collect()
}

fn max_share_gap(data: &Dataset, hists: &[Vec<usize>]) -> f64 {
    let global = global_share(data);
    hists
        .iter()
        .flat_map(|h| {
            let n: usize = h.iter().sum();
            h.iter()
                .zip(&global)
                .map(move |(&c, &g)| (c as f64 / n as f64 - g).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn iid_shards_track_the_global_class_mix() {
    let data = synth_blobs(10, 1000, 2, 1.0, 3).unwrap();
    let part = partition_iid(&data, 3, 8).unwrap();
    let gap = max_share_gap(&data, &part.histograms(&data));
    assert!(gap <= 0.05, "gap {gap}");
}

#[test]
fn huge_concentration_approaches_iid() {
    let data = synth_blobs(10, 1000, 2, 1.0, 3).unwrap();
    let part = partition_label_skew(&data, 3, 1e6, 8).unwrap();
    let gap = max_share_gap(&data, &part.histograms(&data));
    assert!(gap <= 0.05, "gap {gap}");
}

#[test]
fn small_concentration_starves_some_client_of_classes() {
    let data = synth_blobs(10, 100, 2, 1.0, 1).unwrap();
    let mut hits = 0;
    for seed in 0..20 {
        let part = partition_label_skew(&data, 3, 0.1, seed).unwrap();
        let starved = part
            .histograms(&data)
            .iter()
            .any(|h| h.iter().filter(|&&c| c == 0).count() >= 2);
        hits += usize::from(starved);
    }
    assert!(hits >= 1, "no seed produced a client missing two classes");
}

#[test]
fn blob_class_means_match_centers() {
    let (classes, per_class, dim) = (4, 10_000, 6);
    let data = synth_blobs(classes, per_class, dim, 0.1, 21).unwrap();
    let mut sums = vec![vec![0.0; dim]; classes];
    for i in 0..data.len() {
        for (s, &x) in sums[data.labels()[i]].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
    for (k, sum) in sums.iter().enumerate() {
        for (s, c) in sum.iter().zip(blob_center(k, dim)) {
            let mean = s / per_class as f64;
            assert!((mean - c).abs() <= 0.01, "class {k}: mean {mean} vs center {c}");
        }
    }
}

#[test]
fn tight_blobs_are_separable_by_nearest_centroid() {
    let (classes, dim) = (7, 5);
    let data = synth_blobs(classes, 50, dim, 1e-6, 4).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes).map(|k| blob_center(k, dim)).collect();
    for i in 0..data.len() {
        let x = data.row(i);
        let nearest = (0..classes)
            .min_by(|&a, &b| {
                let d = |k: usize| centers[k].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(nearest, data.labels()[i]);
    }
}

#[test]
fn glorot_weights_are_centered() {
    // Pool 10⁴ weights and compare the mean to 3σ of a uniform(-l, l) mean.
    let spec = ModelSpec::softmax_regression(100, 100);
    let params = init_params(&spec, 77).unwrap();
    let w = params.layer("linear.weight").unwrap();
    assert_eq!(w.len(), 10_000);
    let limit = (6.0f64 / 200.0).sqrt();
    let sigma = limit / 3f64.sqrt() / (w.len() as f64).sqrt();
    let mean = w.values.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() <= 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
    assert!(w.values.iter().all(|v| v.abs() <= limit));
}
