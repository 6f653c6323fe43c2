use std::process::ExitCode;

use clap::Parser;
use isocomp::{cmd_ablation, cmd_count, cmd_distill, cmd_eval, cmd_pretrain, cmd_score, Cli, CliError, Command};

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = cli.command.flags();
    let config = flags.resolve()?;
    match &cli.command {
        Command::Count(_) => {
            let r = cmd_count(&config)?;
            if flags.json {
                println!("{}", json(&r));
            } else {
                print!("{}", isocomp::count_table(&r));
            }
            if let Some(dir) = &config.out {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
                std::fs::write(dir.join("count.json"), json(&r)).map_err(|e| CliError::Runtime(e.into()))?;
            }
        }
        Command::Pretrain(_) | Command::Distill(_) => {
            let out = if matches!(cli.command, Command::Pretrain(_)) {
                cmd_pretrain(&config)?
            } else {
                cmd_distill(&config)?
            };
            let s = out.report.summary();
            if flags.json {
                println!("{}", json(&s));
            } else {
                println!(
                    "{} steps: ppl {:.3} -> {:.3} (best {:.3}), {:.1}s",
                    s.steps, s.initial_ppl, s.final_ppl, s.best_ppl, s.wall_clock_secs
                );
                println!("wrote {}", out.dir.display());
            }
        }
        Command::Score(_) => {
            let out = cmd_score(&config)?;
            if flags.json {
                println!("{}", out.report.to_json());
            } else {
                print!("{}", isocomp::importance_table(&out.report));
                println!("wrote {}", out.dir.display());
            }
        }
        Command::Eval(_) => {
            let r = cmd_eval(&config)?;
            if flags.json {
                println!("{}", json(&r));
            } else {
                println!(
                    "perplexity {:.6} over {} tokens ({} windows)",
                    r.report.perplexity, r.report.tokens, r.report.windows
                );
            }
        }
        Command::Ablation(_) => {
            let r = cmd_ablation(&config)?;
            if flags.json {
                println!("{}", json(&r));
            } else {
                print!("{}", r.table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
