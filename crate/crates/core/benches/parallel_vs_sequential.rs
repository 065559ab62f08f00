//! Parallel (rayon) vs sequential paths for the per-head hot loops, plus
//! the two recall executors. Build with default features to get the
//! parallel side; under `--no-default-features` both sides are the
//! sequential implementation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use kvtier::attention::{sparse_attention, sparse_attention_seq};
use kvtier::config::{validate_config, BudgetConfig, HostLayoutMode, ModelDims, SpecConfig};
use kvtier::selection::{select_pages, select_pages_seq, SelectionContext, SummaryStore};
use kvtier::store::{offload_full_page, plan_recall, DeviceCache, HostPool, TransferAgent};

struct Fixture {
    cfg: kvtier::EngineConfig,
    host: HostPool,
    cache: DeviceCache,
    summaries: SummaryStore,
    queries: Vec<Vec<f32>>,
}

fn build_fixture(n_pages: usize) -> Fixture {
    let dims = ModelDims {
        n_qo: 32,
        n_kv: 8,
        d: 128,
        page_size: 32,
        elem_bytes: 2,
    };
    let budget = BudgetConfig {
        budget_tokens: 2048,
        sink_tokens: 512,
        window_tokens: 512,
    };
    let cfg = validate_config(dims, budget, SpecConfig::default()).unwrap();
    let mut rng = StdRng::seed_from_u64(1234);
    let mut host = HostPool::new();
    let mut cache = DeviceCache::from_config(&cfg);
    let mut summaries = SummaryStore::default();
    for _ in 0..n_pages * dims.page_size {
        let row: Vec<f32> = (0..dims.n_kv * dims.d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        cache.append_token(&row, &row);
    }
    for pid in cache.pages_due_for_offload() {
        let (k, v) = cache.extract_page(pid);
        offload_full_page(&mut host, &mut cache, &mut summaries, &k, &v).unwrap();
    }
    cache.release_offloaded();
    let queries: Vec<Vec<f32>> = (0..dims.n_qo)
        .map(|_| (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    Fixture {
        cfg,
        host,
        cache,
        summaries,
        queries,
    }
}

fn selection_ctx<'a>(fx: &'a Fixture) -> SelectionContext<'a> {
    SelectionContext {
        summaries: &fx.summaries,
        first_selectable: fx.cfg.sink_pages,
        last_selectable: fx.host.len(),
        group_size: fx.cfg.dims.group_size(),
        budget_pages: fx.cfg.selectable_pages,
        method: fx.cfg.spec.pooling,
    }
}

fn bench_selection(c: &mut Criterion) {
    let fx = build_fixture(512);
    let ctx = selection_ctx(&fx);
    let n_kv = fx.cfg.dims.n_kv;
    let mut group = c.benchmark_group("selection_scoring");
    group.bench_function(BenchmarkId::new("parallel", 512), |b| {
        b.iter(|| select_pages(&fx.queries, n_kv, &ctx).unwrap())
    });
    group.bench_function(BenchmarkId::new("sequential", 512), |b| {
        b.iter(|| select_pages_seq(&fx.queries, n_kv, &ctx).unwrap())
    });
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut fx = build_fixture(128);
    let ctx = selection_ctx(&fx);
    let n_kv = fx.cfg.dims.n_kv;
    let selection = select_pages(&fx.queries, n_kv, &ctx).unwrap();
    let plan = plan_recall(
        &selection,
        &fx.cache,
        &fx.cfg.geometry(),
        HostLayoutMode::Hnd,
        None,
    )
    .unwrap();
    let mut agent = TransferAgent::new();
    agent
        .execute_streamed(&plan, &fx.host, &mut fx.cache, 0)
        .unwrap();
    let g = fx.cfg.dims.group_size();
    let mut group = c.benchmark_group("sparse_attention");
    group.bench_function("parallel", |b| {
        b.iter(|| sparse_attention(&fx.queries, &fx.cache, &selection, g).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| sparse_attention_seq(&fx.queries, &fx.cache, &selection, g).unwrap())
    });
    group.finish();
}

fn bench_recall_executors(c: &mut Criterion) {
    let fx = build_fixture(128);
    let ctx = selection_ctx(&fx);
    let n_kv = fx.cfg.dims.n_kv;
    let selection = select_pages(&fx.queries, n_kv, &ctx).unwrap();
    let plan = plan_recall(
        &selection,
        &fx.cache,
        &fx.cfg.geometry(),
        HostLayoutMode::Hnd,
        None,
    )
    .unwrap();
    let mut group = c.benchmark_group("recall_executor");
    for streamed in [false, true] {
        let name = if streamed { "streamed" } else { "sequential" };
        group.bench_function(name, |b| {
            b.iter_batched(
                || (fx.cache.clone(), TransferAgent::new()),
                |(mut cache, mut agent)| {
                    if streamed {
                        agent
                            .execute_streamed(&plan, &fx.host, &mut cache, 0)
                            .unwrap()
                    } else {
                        agent
                            .execute_sequential(&plan, &fx.host, &mut cache, 0)
                            .unwrap()
                    }
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_selection,
    bench_attention,
    bench_recall_executors
);
criterion_main!(benches);
