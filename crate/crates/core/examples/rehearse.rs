use hygen_core::arena::TaskSpec;
use hygen_core::data::*;
use hygen_core::nets::NetDims;
use hygen_core::policy::*;
use hygen_core::skills::*;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let dims = NetDims {
        n_skills: 4, n_heads: 4, embed: 128, hidden: 64,
        max_allies: 6, max_enemies: 7, mix_hidden: 32,
    };
    let src = ["3v3", "4v5", "5v6"];
    let all = ["3v3", "4v5", "5v6", "4v4", "5v5"];
    let tasks: BTreeMap<String, TaskSpec> =
        all.iter().map(|n| (n.to_string(), TaskSpec::parse(n).unwrap())).collect();
    let strengths = [("3v3", 0.45), ("4v5", 0.5), ("5v6", 0.5)];
    let mut data = Dataset::new(src.iter().map(|s| s.to_string()).collect(), "medium");
    for (n, p) in strengths {
        let (eps, s) = generate_dataset(&tasks[n], p, "medium", 700, 7).unwrap();
        println!("{n}: wr {:.2} len {:.1}", s.win_rate, s.mean_length);
        data.extend_validated(eps).unwrap();
    }
    let t0 = Instant::now();
    let s1cfg = SkillsConfig { steps: 4000, ..Default::default() };
    let (stage1, log) = train_skills(&data, &tasks, &dims, &s1cfg, 0).unwrap();
    println!("stage1 in {:.0?}; loss {:.3}->{:.3}", t0.elapsed(), log[0].l_vae, log.last().unwrap().l_vae);

    let srcv: Vec<String> = src.iter().map(|s| s.to_string()).collect();
    let pcfg = PolicyConfig { steps: 6000, eval_every: 1000, ..Default::default() };
    for (name, flags) in [
        ("hybrid", ModeFlags::hybrid()),
        ("offline", ModeFlags::offline_only()),
        ("norefine", ModeFlags { refine_decoder: false, ..ModeFlags::hybrid() }),
        ("online", ModeFlags::online_only()),
    ] {
        let t0 = Instant::now();
        let s1 = if name == "online" { init_stage1(&dims, 0) } else { stage1.clone() };
        let d = if name == "online" { Dataset::new(srcv.clone(), "medium") } else { data.clone() };
        let out = train_policy(&d, &srcv, &tasks, &dims, &s1, &pcfg, flags, 0).unwrap();
        print!("{name} ({:.0?}):", t0.elapsed());
        for task in ["3v3", "4v5", "5v6"] {
            let last = out.metrics.iter().rev().find(|r| r.eval_task.as_deref() == Some(task)).unwrap();
            print!(" {task}:{:.2}", last.eval_win_rate.unwrap());
        }
        print!(" | 3v3@t:");
        for row in out.metrics.iter().filter(|r| r.eval_task.as_deref() == Some("3v3")) {
            print!(" {}:{:.2}", row.step, row.eval_win_rate.unwrap());
        }
        println!();
        let params = out.params;
        print!("  zero-shot:");
        for t in ["4v4", "5v5"] {
            let (wr, _) = zero_shot_eval(&params, &dims, &tasks[t], 32, 99).unwrap();
            print!(" {t} {wr:.2}");
        }
        println!();
    }
    let t0 = Instant::now();
    let bc = train_bc(&data, &srcv, &tasks, &dims, &PolicyConfig { steps: 6000, eval_every: 2000, ..Default::default() }, 0).unwrap();
    print!("bc ({:.0?}):", t0.elapsed());
    for task in ["3v3", "4v5", "5v6"] {
        let last = bc.metrics.iter().rev().find(|r| r.eval_task.as_deref() == Some(task)).unwrap();
        print!(" {task}:{:.2}", last.eval_win_rate.unwrap());
    }
    println!();
    print!("  bc zero-shot:");
    for t in ["4v4", "5v5"] {
        let actor = Actor::Cloning { decoder: &bc.params };
        let (wr, _) = evaluate(&actor, &tasks[t], &dims, 32, 99).unwrap();
        print!(" {t} {wr:.2}");
    }
    println!();
}
