use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use flowprior::flow::{EncoderKind, FlowConfig, FlowModel};
use flowprior::par::Execution;
use flowprior::restoration::{pixels_to_model, Init, RestorationProblem, Schedule};
use flowprior::tiler::{plan, restore_tiled};
use flowprior::toydata::{sprites, SpriteSpec};
use flowprior::training::{TrainConfig, Trainer};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn flow() -> FlowConfig {
    FlowConfig {
        levels: 3,
        steps: 2,
        c_inter: 16,
        blocks: 1,
        channels: 1,
        height: 32,
        width: 32,
        encoder: EncoderKind::Conv3,
        base_learn_std: true,
    }
}

fn train_step(c: &mut Criterion) {
    let data = sprites(&SpriteSpec::default(), 64, 1).train;
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut config = TrainConfig::sprites();
        config.flow = flow();
        config.batch_size = 16;
        let mut trainer = Trainer::new(config, exec).unwrap();
        trainer.ensure_initialized(&data).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer.train_step(&data).unwrap())
        });
    }
    group.finish();
}

fn tiled_restore(c: &mut Criterion) {
    let model = FlowModel::new(flow(), 2).unwrap();
    let image = pixels_to_model(
        &sprites(
            &SpriteSpec {
                size: 64,
                ..SpriteSpec::default()
            },
            10,
            3,
        )
        .train[0],
    );
    let problem = RestorationProblem::new(image, None, 99.0).unwrap();
    let grid = plan(64, 64, 32, 4).unwrap();
    let schedule = Schedule {
        steps_per_stage: vec![3; 3],
        final_steps: 5,
        eta: 1.0,
    };
    let mut group = c.benchmark_group("tiled_restore");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| restore_tiled(&model, &problem, &schedule, Init::Encode, &grid, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, tiled_restore);
criterion_main!(benches);
