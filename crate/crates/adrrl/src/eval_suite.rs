//! Packaged experiment recipes: the robustness sweep over environment
//! parameters, guided-vs-unguided sampling comparisons, and the full
//! property battery with deliberate-bug mutation checks.

use crate::config::RunConfig;
use crate::env::{discounted_return, make_env, EnvParams, Trajectory};
use crate::guidance::{adversarial_sample, ActionGuide, GuidanceConfig};
use crate::orchestrator::{
    adrrl_train, derive_rng, evaluate_policy, Agent, OrchestratorError,
};
use crate::stats::{ks_two_sample, welch_t_test_less};
use crate::verify::{budget_suite, cvar_suite, density_suite, envelope_suite, grad_suite, SuiteReport};
use std::fmt::Write as _;
use std::path::Path;

/// One sampled model trajectory with its chain density-ratio accounting.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub traj: Trajectory,
    pub ret: f64,
    pub xi_log_total: f64,
    pub cert_log_total: f64,
}

/// Draws `count` trajectories from the agent's world model under the given
/// guidance settings. Initial states are drawn from the environment's reset
/// distribution and inpainted; actions are clamped to the control range and
/// rewards labeled by the learned reward model.
pub fn sample_trajectories(
    agent: &Agent,
    cfg: &GuidanceConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<SampledTrajectory>, OrchestratorError> {
    let mut rng = derive_rng(seed, "sample_trajectories", 0);
    let mut env = make_env(agent.kind, agent.config.env.env_params())?;
    let gamma = agent.config.a2c.gamma;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s0 = env.reset(&mut rng).to_vec();
        let s0_std: Vec<f64> = s0
            .iter()
            .enumerate()
            .map(|(j, x)| (x - agent.standardizer.mean[j]) / agent.standardizer.std[j])
            .collect();
        let (tensor_std, records) = adversarial_sample(
            &agent.denoiser,
            &agent.zphi,
            &agent.schedule,
            cfg,
            &agent.layout,
            Some(&s0_std),
            Some(&agent.policy as &dyn ActionGuide),
            &mut rng,
        );
        let tensor = agent.standardizer.decode(&tensor_std);
        let mut traj = Trajectory::from_tensor(
            &tensor,
            agent.layout.d_s,
            agent.layout.d_a,
            agent.layout.len,
            gamma,
        );
        for a in &mut traj.actions {
            for x in a.iter_mut() {
                *x = x.clamp(-1.0, 1.0);
            }
        }
        for t in 0..traj.len() {
            traj.rewards[t] = agent.reward.predict(&traj.states[t], &traj.actions[t])?;
        }
        out.push(SampledTrajectory {
            ret: discounted_return(&traj),
            xi_log_total: records.iter().map(|r| r.xi_log).sum(),
            cert_log_total: records.iter().map(|r| r.xi_cert_log).sum(),
            traj,
        });
    }
    Ok(out)
}

/// Guided sampling must shift the model's return distribution downward;
/// with guidance off the two distributions must be indistinguishable.
/// `flip_sign` is a fault-injection hook for the mutation battery.
pub fn guidance_effect_suite(
    agent: &Agent,
    alpha: f64,
    count: usize,
    flip_sign: bool,
    seed: u64,
) -> Result<SuiteReport, OrchestratorError> {
    let mut report = SuiteReport::new("guidance effect");
    let mut guided_cfg = GuidanceConfig::new(alpha).expect("alpha in (0, 1]");
    guided_cfg.action_scale = agent.config.guidance.action_scale;
    guided_cfg.flip_sign = flip_sign;
    let unguided_cfg = GuidanceConfig::disabled();

    let guided = sample_trajectories(agent, &guided_cfg, count, seed)?;
    let unguided = sample_trajectories(agent, &unguided_cfg, count, seed + 1)?;
    let g_ret: Vec<f64> = guided.iter().map(|s| s.ret).collect();
    let u_ret: Vec<f64> = unguided.iter().map(|s| s.ret).collect();

    let p = welch_t_test_less(&g_ret, &u_ret);
    report.push(
        "guidance lowers returns",
        p < 0.01,
        format!(
            "guided mean {:.4} vs unguided mean {:.4} over {count} samples, one-sided p = {p:.2e}",
            crate::stats::mean(&g_ret),
            crate::stats::mean(&u_ret)
        ),
    );

    let off = sample_trajectories(agent, &GuidanceConfig::disabled(), count, seed + 2)?;
    let o_ret: Vec<f64> = off.iter().map(|s| s.ret).collect();
    let (ks, ks_p) = ks_two_sample(&o_ret, &u_ret);
    report.push(
        "disabled guidance is a no-op",
        ks_p > 0.001,
        format!("KS statistic {ks:.4}, p = {ks_p:.3} between two unguided batches"),
    );
    Ok(report)
}

/// One grid cell of the robustness sweep for one trained agent.
#[derive(Debug, Clone)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub seed: u64,
    pub mass_factor: f64,
    pub mean_return: f64,
    pub std_error: f64,
    pub cvar: f64,
}

#[derive(Debug, Clone)]
pub struct AlphaSummary {
    pub alpha: f64,
    /// min over grid cells of the median-over-seeds mean return
    pub worst_cell_median: f64,
    /// median-over-seeds mean return at the unmodified cell
    pub nominal_median: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub mass_factors: Vec<f64>,
    pub rows: Vec<RobustnessRow>,
    pub summaries: Vec<AlphaSummary>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains one agent per (alpha, seed) and evaluates each on a mass-scaled
/// grid of the real environment. The headline metric is the worst grid
/// cell's median-over-seeds return; nominal is the factor-1 cell.
pub fn robustness_experiment(
    base: &RunConfig,
    alphas: &[f64],
    seeds: &[u64],
    mass_factors: &[f64],
    episodes: usize,
) -> Result<RobustnessReport, OrchestratorError> {
    assert!(!alphas.is_empty() && !seeds.is_empty() && !mass_factors.is_empty());
    let base_params = base.env.env_params();
    let grid: Vec<EnvParams> = mass_factors
        .iter()
        .map(|&f| EnvParams {
            mass: base_params.mass * f,
            ..base_params
        })
        .collect();

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &alpha in alphas {
        let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.guidance.alpha = alpha;
            cfg.guidance.enabled = alpha < 1.0;
            cfg.run.seed = seed;
            let (agent, _) = adrrl_train(&cfg)?;
            let evals = evaluate_policy(&agent, agent.kind, &grid, episodes, alpha.min(0.5), false, seed)?;
            for (cell, row) in evals.iter().enumerate() {
                per_cell[cell].push(row.mean_return);
                rows.push(RobustnessRow {
                    alpha,
                    seed,
                    mass_factor: mass_factors[cell],
                    mean_return: row.mean_return,
                    std_error: row.std_error,
                    cvar: row.cvar,
                });
            }
        }
        let medians: Vec<f64> = per_cell.iter().map(|c| median(c)).collect();
        let worst = medians.iter().cloned().fold(f64::INFINITY, f64::min);
        let nominal_idx = mass_factors
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - 1.0).abs().partial_cmp(&(*b - 1.0).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        summaries.push(AlphaSummary {
            alpha,
            worst_cell_median: worst,
            nominal_median: medians[nominal_idx],
        });
    }
    Ok(RobustnessReport {
        mass_factors: mass_factors.to_vec(),
        rows,
        summaries,
    })
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,seed,mass_factor,mean_return,std_error,cvar\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.alpha, r.seed, r.mass_factor, r.mean_return, r.std_error, r.cvar
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Robustness sweep\n\n");
        out.push_str("Headline metric: worst grid cell's median-over-seeds mean return.\n");
        out.push_str("This is a small-scale proxy for full parameter-sweep curves, not a reproduction of them.\n\n");
        out.push_str("| alpha | worst-cell median | nominal-cell median |\n");
        out.push_str("|------:|------------------:|--------------------:|\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} |",
                s.alpha, s.worst_cell_median, s.nominal_median
            );
        }
        out.push_str("\nPer-cell medians over seeds:\n\n| alpha | mass factor | median return |\n|------:|------------:|--------------:|\n");
        for s in &self.summaries {
            for &f in &self.mass_factors {
                let cell: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.alpha == s.alpha && r.mass_factor == f)
                    .map(|r| r.mean_return)
                    .collect();
                let _ = writeln!(out, "| {} | {} | {:.4} |", s.alpha, f, median(&cell));
            }
        }
        out
    }

    /// Two-column plot data (mass factor, median return) for one alpha.
    pub fn to_plot_tsv(&self, alpha: f64) -> String {
        let mut out = String::new();
        for &f in &self.mass_factors {
            let cell: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.alpha == alpha && r.mass_factor == f)
                .map(|r| r.mean_return)
                .collect();
            if !cell.is_empty() {
                let _ = writeln!(out, "{f}\t{}", median(&cell));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), OrchestratorError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("robustness.csv"), self.to_csv())?;
        std::fs::write(dir.join("robustness.md"), self.to_markdown())?;
        for s in &self.summaries {
            std::fs::write(
                dir.join(format!("robustness_alpha_{}.tsv", s.alpha)),
                self.to_plot_tsv(s.alpha),
            )?;
        }
        Ok(())
    }
}

/// Sample counts for the property battery; `Default` is desk scale.
#[derive(Debug, Clone)]
pub struct BatteryScale {
    pub density_cases: usize,
    pub budget_cases: usize,
    pub guided_chains: usize,
    pub unguided_chains: usize,
    pub cvar_cases: usize,
    pub grad_cases: usize,
    pub effect_samples: usize,
    pub train_config: RunConfig,
}

impl Default for BatteryScale {
    fn default() -> Self {
        let text = r#"
            [env]
            kind = "point_mass_1d"
            episode_horizon = 80
            window = 8

            [diffusion]
            n_steps = 16
            hidden = 48
            layers = 2
            batch = 32
            embed_dim = 16
            lr = 1e-3

            [return_model]
            lr = 1e-3
            iterations = 60

            [a2c]
            batch = 64
            hidden = 24
            layers = 2

            [run]
            m_iterations = 25
            k_iterations = 200
            seed = 7
            buffer_capacity = 400
            synthetic_batch = 16
        "#;
        Self {
            density_cases: 2_000,
            budget_cases: 10_000,
            guided_chains: 500,
            unguided_chains: 20_000,
            cvar_cases: 1_000,
            grad_cases: 20,
            effect_samples: 1_000,
            train_config: RunConfig::from_str_with_env(text, &[]).unwrap(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatteryReport {
    pub suites: Vec<SuiteReport>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }
}

impl std::fmt::Display for BatteryReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.suites {
            write!(f, "{s}")?;
        }
        writeln!(
            f,
            "battery ... {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Runs every invariant suite plus the deliberate-bug mutations: a flipped
/// guidance sign must break the "guidance lowers returns" check and a 10x
/// inflated guidance scale must break the per-step budget check. Mutation
/// detections are reported as passing checks of the battery itself.
pub fn property_battery(scale: &BatteryScale, seed: u64) -> Result<BatteryReport, OrchestratorError> {
    let mut rng = derive_rng(seed, "battery", 0);
    let mut suites = vec![
        density_suite(scale.density_cases, &mut rng),
        budget_suite(scale.budget_cases, 1.0, &mut rng),
        envelope_suite(scale.guided_chains, scale.unguided_chains, &mut rng),
        cvar_suite(scale.cvar_cases, &mut rng),
        grad_suite(scale.grad_cases, &mut rng),
    ];

    let (agent, _) = adrrl_train(&scale.train_config)?;
    suites.push(guidance_effect_suite(
        &agent,
        0.1,
        scale.effect_samples,
        false,
        seed,
    )?);

    let mut mutations = SuiteReport::new("mutation sensitivity");
    let flipped = guidance_effect_suite(&agent, 0.1, scale.effect_samples, true, seed)?;
    let flipped_detected = !flipped
        .checks
        .iter()
        .find(|c| c.name == "guidance lowers returns")
        .map(|c| c.passed)
        .unwrap_or(true);
    mutations.push(
        "sign-flipped guidance detected",
        flipped_detected,
        "flipping the guidance shift sign must fail the lowers-returns check".into(),
    );
    let inflated = budget_suite(scale.budget_cases, 10.0, &mut rng);
    mutations.push(
        "inflated guidance scale detected",
        !inflated.passed(),
        "a 10x guidance scale must fail the per-step budget check".into(),
    );
    suites.push(mutations);

    Ok(BatteryReport { suites })
}
