use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vssmseg_core::gradcheck::uniform;
use vssmseg_core::layers::ParamStore;
use vssmseg_core::ssm::{discretize_zoh, scan_convolutional, scan_recurrent, selective_scan_core, Delta, SsmParams};
use vssmseg_core::tensor::Conv2dSpec;
use vssmseg_core::vss::VssBlock;
use vssmseg_core::{ModelConfig, Tape, Tensor, VmUnet};

fn scan_modes(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan");
    let n = 16;
    let p = SsmParams::new(
        uniform(&[n], -2.0, -0.05, 1).into_vec(),
        uniform(&[n], -1.0, 1.0, 2).into_vec(),
        uniform(&[n], -1.0, 1.0, 3).into_vec(),
        Delta::Constant(0.05),
    )
    .unwrap();
    let d = discretize_zoh(&p).unwrap();
    let cvec = p.c.clone();
    for l in [64usize, 256, 1024] {
        let x = uniform(&[l], -1.0, 1.0, 4);
        g.bench_with_input(BenchmarkId::new("recurrent", l), &x, |b, x| {
            b.iter(|| scan_recurrent(&d, &cvec, black_box(x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("conv", l), &x, |b, x| {
            b.iter(|| scan_convolutional(&d, &cvec, black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn selective(c: &mut Criterion) {
    let (bsz, l, dch, n) = (1, 1024, 24, 8);
    let u = uniform(&[bsz, l, dch], -1.0, 1.0, 1).cast::<f32>();
    let delta = uniform(&[bsz, l, dch], 0.001, 0.1, 2).cast::<f32>();
    let a = uniform(&[dch, n], -4.0, -0.5, 3).cast::<f32>();
    let bm = uniform(&[bsz, l, n], -1.0, 1.0, 4).cast::<f32>();
    let cm = uniform(&[bsz, l, n], -1.0, 1.0, 5).cast::<f32>();
    let skip = Tensor::<f32>::ones(vec![dch]);
    c.bench_function("selective_scan_core 1024x24x8", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let k = |t: &Tensor<f32>| tape.constant(t.clone());
            selective_scan_core(&k(&u), &k(&delta), &k(&a), &k(&bm), &k(&cm), &k(&skip)).unwrap()
                .into_value()
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = uniform(&[1, 16, 64, 64], -1.0, 1.0, 1).cast::<f32>();
    let w = uniform(&[16, 16, 3, 3], -0.1, 0.1, 2).cast::<f32>();
    c.bench_function("conv2d 3x3 16->16 64x64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (x, w) = (tape.constant(black_box(&x).clone()), tape.constant(w.clone()));
            x.conv2d(&w, None, Conv2dSpec::same(3)).unwrap().into_value()
        })
    });
}

fn blocks(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = VssBlock::new(&mut store, "b", 16, 24, 8, &mut rng).unwrap();
    let x = uniform(&[1, 16, 16, 16], -1.0, 1.0, 1).cast::<f32>();
    c.bench_function("vss block forward 16x16x16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.constants(&tape);
            block.forward(&p, &tape.constant(x.clone())).unwrap().into_value()
        })
    });
    c.bench_function("vss block forward+backward 16x16x16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.leaves(&tape);
            let y = block.forward(&p, &tape.constant(x.clone())).unwrap().sum_all();
            tape.backward(&y).unwrap()
        })
    });
    let model = VmUnet::<f32>::new(ModelConfig::desk(), 0).unwrap();
    let img = uniform(&[1, 3, 64, 64], 0.0, 1.0, 2).cast::<f32>();
    c.bench_function("desk model predict 64x64", |b| b.iter(|| model.predict(black_box(&img)).unwrap()));
}

criterion_group!(benches, scan_modes, selective, conv, blocks);
criterion_main!(benches);
