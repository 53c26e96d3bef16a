use flux_upscale::config::PipelineConfig;
use flux_upscale::eval::{aggregate, Grouping};
use flux_upscale::pipeline::{prepare, run_experiment};
use flux_upscale::synth::synth_generate;

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = PipelineConfig::default();
    if let Some(p) = args.get(1) {
        cfg = PipelineConfig::load(std::path::Path::new(p)).unwrap();
    }
    let t0 = std::time::Instant::now();
    let sites = synth_generate(cfg.synth.sites, cfg.synth.days, &mut flux_upscale::train::stream_rng(cfg.train.seed, flux_upscale::train::Stream::Synth)).unwrap();
    let records: Vec<_> = sites.iter().flat_map(|s| s.records.clone()).collect();
    let prep = prepare(&records, &cfg, cfg.train.seed).unwrap();
    println!("train {} held {}", prep.train.len(), prep.held_out.len());
    let exp = run_experiment(&prep, &cfg).unwrap();
    print!("{}", flux_upscale::train::format_metrics_log(&exp.runs[0].log));
    for g in aggregate(&exp.metrics, Grouping::All).unwrap() {
        println!("{} {} rmse {:.4} r2 {:?}", g.model, g.target.name(), g.rmse.mean, g.r2.map(|s| s.mean));
    }
    if std::env::var("PER_SITE").is_ok() {
        for m in &exp.metrics {
            let p = sites.iter().find(|s| s.site_id == m.site_id).unwrap().params;
            println!("site {} {} {} rmse {:.3}  lue {:.2} rb {:.2} q10 {:.2} topt {:.1}", m.site_id, m.model, m.target.name(), m.rmse, p.lue, p.rb, p.q10, p.t_opt);
        }
        for s in &sites {
            if prep.split.train.contains(&s.site_id) {
                let p = s.params;
                println!("train {} lue {:.2} rb {:.2} q10 {:.2} topt {:.1}", s.site_id, p.lue, p.rb, p.q10, p.t_opt);
            }
        }
    }
    let mut train_metrics = Vec::new();
    for kind in flux_upscale::model::ModelKind::ALL {
        let members = flux_upscale::pipeline::members_of(&exp.runs, kind).unwrap();
        let rows = flux_upscale::infer::predict_sites(&members, &prep.train, cfg.train.support_size).unwrap();
        train_metrics.extend(flux_upscale::eval::site_metrics(kind.name(), &rows, &prep.labels, false).unwrap());
    }
    for g in aggregate(&train_metrics, Grouping::All).unwrap() {
        println!("in-sample {} {} rmse {:.4}", g.model, g.target.name(), g.rmse.mean);
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
