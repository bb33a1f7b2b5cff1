use pgf_core::meter::MemClass;
use pgf_core::oracle::unrolled_jvp;
use pgf_core::sample::normal_vec;
use pgf_core::tangent::pgf_jvp_dense;
use pgf_core::tose::{
    generated_direction_row, DiscardSink, GeneratedSource, MemorySink, MemorySource, ToseOptions,
};
use pgf_core::numerics::relative_error;
use pgf_core::{run_tose, Activation, BlockPlan, GlrParams, MemoryMeter, ScanStrategy};

#[test]
fn block_sizes_agree_with_dense_path() {
    let len = 4096;
    let p = GlrParams::<f64>::random(2, 4, 1).with_activation(Activation::Silu);
    let u: Vec<f64> = normal_vec(2, 1, len * 2);
    let du: Vec<f64> = normal_vec(2, 2, len * 2);
    let dense = pgf_jvp_dense(&p, &u, &du, None, ScanStrategy::Sequential).unwrap();
    for block in [1, 3, 16, 64, 256, len] {
        for strategy in [ScanStrategy::Sequential, ScanStrategy::Associative] {
            let meter = MemoryMeter::new();
            let mut src = MemorySource::new(&meter, 2, u.clone(), du.clone()).unwrap();
            let mut sink = MemorySink::new(&meter, len, 2);
            let opts = ToseOptions { strategy, h0: None };
            run_tose(&p, &mut src, &mut sink, &BlockPlan::new(len, block).unwrap(), &opts, &meter)
                .unwrap();
            assert!(relative_error(&sink.dy, &dense.dy) <= 1e-12, "B={block}");
            assert!(relative_error(&sink.y, &dense.y) <= 1e-12, "B={block}");
        }
    }
}

#[test]
fn streamed_matches_unrolled_oracle() {
    let len = 2000;
    let p = GlrParams::<f64>::random(3, 5, 3);
    let u: Vec<f64> = normal_vec(4, 1, len * 3);
    let du: Vec<f64> = normal_vec(4, 2, len * 3);
    let oracle = unrolled_jvp(&p, &u, &du, &MemoryMeter::new()).unwrap();
    let meter = MemoryMeter::new();
    let mut src = MemorySource::new(&meter, 3, u, du).unwrap();
    let mut sink = MemorySink::new(&meter, len, 3);
    run_tose(
        &p,
        &mut src,
        &mut sink,
        &BlockPlan::new(len, 100).unwrap(),
        &ToseOptions::default(),
        &meter,
    )
    .unwrap();
    assert!(relative_error(&sink.dy, &oracle.dy) <= 1e-12);
}

#[test]
fn graph_peak_equal_at_l_2l_4l() {
    let p = GlrParams::<f64>::random(2, 8, 5);
    let peak = |len: usize| {
        let meter = MemoryMeter::new();
        let mut src = GeneratedSource::new(2, len, 9, |t: usize, out: &mut [f64]| {
            generated_direction_row(9, t, out)
        });
        let (_, stats) = run_tose(
            &p,
            &mut src,
            &mut DiscardSink,
            &BlockPlan::new(len, 128).unwrap(),
            &ToseOptions::default(),
            &meter,
        )
        .unwrap();
        assert!(meter.is_balanced());
        assert_eq!(stats.peak_graph_bytes, meter.peak(MemClass::Graph));
        stats.peak_graph_bytes
    };
    let base = peak(5000);
    assert_eq!(base, peak(10000));
    assert_eq!(base, peak(20000));
}

#[test]
fn memory_backed_io_grows_by_payload_only() {
    let (d, n) = (2, 8);
    let p = GlrParams::<f64>::random(d, n, 5);
    let peak = |len: usize| {
        let meter = MemoryMeter::new();
        let u: Vec<f64> = normal_vec(1, 1, len * d);
        let du: Vec<f64> = normal_vec(1, 2, len * d);
        let mut src = MemorySource::new(&meter, d, u, du).unwrap();
        let mut sink = MemorySink::new(&meter, len, d);
        run_tose(
            &p,
            &mut src,
            &mut sink,
            &BlockPlan::new(len, 64).unwrap(),
            &ToseOptions::default(),
            &meter,
        )
        .unwrap();
        meter.peak_total()
    };
    let runs: Vec<(usize, usize)> = [1000, 2000, 3000, 4000].iter().map(|&l| (l, peak(l))).collect();
    let rep = pgf_core::meter::slope_report(&runs).unwrap();
    // u, du, y, dy: four streams of D doubles per step
    assert!((rep.slope - (4 * d * 8) as f64).abs() < 1e-9, "{rep:?}");
}
