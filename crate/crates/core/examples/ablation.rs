//! Pretrain-only vs post-training with and without multi-step rewards on the
//! planted synthetic corpus. Usage: `ablation [seeds]`.

use std::time::Instant;

use reasonrec::dataeval::{ExperimentConfig, Prepared};

fn main() -> reasonrec::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    println!("seed,pretrain_r10,pars_r10,h1_r10,secs");
    for seed in 0..seeds {
        let t = Instant::now();
        let cfg = ExperimentConfig { seed, ..Default::default() };
        let p = Prepared::new(&cfg)?;
        let t_tok = t.elapsed().as_secs_f64();
        let (base, pre) = p.pretrain()?;
        let t_pre = t.elapsed().as_secs_f64();
        let cases = p.test_cases()?;
        let r = |m| -> reasonrec::Result<f64> { Ok(p.evaluate(m, &cases)?.metrics.get("R@10").unwrap_or(0.0)) };
        let r_base = r(&base)?;
        let (pars, rep) = p.posttrain(&base, &p.config.grpo)?;
        let t_pars = t.elapsed().as_secs_f64();
        let mut h1 = p.config.grpo;
        h1.reward.horizon = 1;
        let (single, rep1) = p.posttrain(&base, &h1)?;
        eprintln!(
            "tok {t_tok:.1}s pre {t_pre:.1}s pars {t_pars:.1}s loss {:.3} sel {} {} val {:?}",
            pre.final_metrics.total, rep.selected_iter, rep1.selected_iter, rep.validation
        );
        println!("{seed},{r_base},{},{},{:.1}", r(&pars)?, r(&single)?, t.elapsed().as_secs_f64());
    }
    Ok(())
}
