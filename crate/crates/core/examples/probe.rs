use ica_core::credit::CreditConfig;
use ica_core::optimizer::{compare_arms, UpdateConfig};
use ica_core::simulator::reference_world;

fn main() {
    let world = reference_world();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let base: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let cfg = UpdateConfig {
        learning_rate: lr,
        steps,
        seed: base,
        ..UpdateConfig::default()
    };
    let start = std::time::Instant::now();
    let pairs = compare_arms(&world, &cfg, &CreditConfig::default(), 5).unwrap();
    let mut ica_sum = 0.0;
    let mut grpo_sum = 0.0;
    let mut half_wins = 0;
    for (grpo, ica) in &pairs {
        println!(
            "seed {}: grpo final {:.3} half@{}  | ica final {:.3} half@{}",
            grpo.seed,
            grpo.final_success_rate,
            grpo.steps_to_half_max,
            ica.final_success_rate,
            ica.steps_to_half_max
        );
        ica_sum += ica.final_success_rate;
        grpo_sum += grpo.final_success_rate;
        if ica.steps_to_half_max <= grpo.steps_to_half_max {
            half_wins += 1;
        }
    }
    println!(
        "lr={lr} steps={steps}: mean ica {:.3} vs grpo {:.3}; ica half-wins {}/5; {:?}",
        ica_sum / 5.0,
        grpo_sum / 5.0,
        half_wins,
        start.elapsed()
    );
}
