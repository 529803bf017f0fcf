use std::sync::Arc;
use lscopt::env::{self, EnvState};
use lscopt::gen::GenSpec;
use lscopt::solution::{ActionKind, Problem};

fn main() {
    let seed = 9u64;
    let spec = GenSpec::uniform(7, 2, 6, seed + 100);
    let g = Arc::new(lscopt::gen::generate(&spec).unwrap());
    let init = env::init_solution(&g, &Problem::Tsp, seed).unwrap();
    let mut state = EnvState::new(Arc::clone(&g), Problem::Tsp, init, usize::MAX).unwrap();
    for step in 0..40 {
        let actions = state.actions_of_kind(ActionKind::SeqSwap).unwrap();
        let mut best: Option<(f64, lscopt::Action)> = None;
        for a in actions {
            let r = state.reward(&a).unwrap();
            if r > 0.0 && best.map_or(true, |(br, _)| r > br) {
                best = Some((r, a));
            }
        }
        let Some((r, a)) = best else { eprintln!("local optimum after {step} steps"); return; };
        eprintln!("step {step}: perm {:?} obj {:.17} take {:?} r {:.3e}", state.solution().tour().unwrap(), state.objective(), a, r);
        let (next, _, _) = state.step(&a).unwrap();
        state = next;
    }
}
