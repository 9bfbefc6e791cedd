mod common;

use common::{disc_loss, fd, flat_params, gen_loss, rel_err, set_flat_params, tiny_conv_config, uniform_tensor};
use tiltnet::hmc::{
    hmc_iterate, leapfrog, run_chain, ChainState, GaussianPotential, HmcConfig, Init, NodePotential, Potential,
};
use tiltnet::loss::{disc_loss_and_grad, gen_loss_and_grad};
use tiltnet::net::{LayerKind, LayerSpec};
use tiltnet::{Network, NetworkConfig, Tensor};

fn relu_config(seed: u64) -> NetworkConfig {
    let mut cfg = tiny_conv_config(3, seed);
    cfg.layers.insert(1, LayerSpec::new("relu1", LayerKind::Relu));
    cfg
}

#[test]
fn parameter_gradients_match_finite_differences_for_both_losses() {
    for cfg in [tiny_conv_config(3, 5), relu_config(6)] {
        let mut net = Network::build(cfg).unwrap();
        let mut rng = common::rng(9);
        let images = uniform_tensor(&mut rng, &[6, 1, 6, 6], 1.0);
        let labels = vec![0, 1, 2, 2, 1, 0];
        let base = flat_params(net.params());

        for gen in [false, true] {
            let (scores, cache) = net.forward_batch(&images).unwrap();
            let (_, g) = if gen {
                gen_loss_and_grad(&scores, &labels).unwrap()
            } else {
                disc_loss_and_grad(&scores, &labels).unwrap()
            };
            let analytic = flat_params(&net.backward_params(&cache, &g).unwrap());
            let numeric = fd(&base, |p| {
                set_flat_params(&mut net, p);
                let (s, _) = net.forward_batch(&images).unwrap();
                if gen {
                    gen_loss(&s, &labels)
                } else {
                    disc_loss(&s, &labels)
                }
            });
            set_flat_params(&mut net, &base);
            assert!(rel_err(&analytic, &numeric) < 1e-6, "gen={gen}");
        }
    }
}

#[test]
fn scores_are_permutation_equivariant() {
    let net = Network::build(relu_config(2)).unwrap();
    let mut rng = common::rng(4);
    let images = uniform_tensor(&mut rng, &[5, 1, 6, 6], 1.0);
    let perm = [3, 0, 4, 1, 2];
    let items: Vec<Tensor> = perm.iter().map(|&i| images.item(i).unwrap()).collect();
    let permuted = Tensor::stack(&items).unwrap();
    let (a, _) = net.forward_batch(&images).unwrap();
    let (b, _) = net.forward_batch(&permuted).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(b.row(row), a.row(src));
    }
}

#[test]
fn lenet_potential_gradients_match_finite_differences() {
    let net = Network::build(NetworkConfig::lenet(3)).unwrap();
    let mut rng = common::rng(12);
    for (layer, channel) in [("ip2", 3), ("conv2", 7)] {
        let node = net.truncate_at(layer, channel).unwrap();
        let pot = NodePotential::new(node, 10.0);
        let x = uniform_tensor(&mut rng, pot.input_shape(), 1.0);
        let (_, grad) = pot.value_and_grad(&x).unwrap();
        let numeric = fd(x.data(), |p| {
            pot.value(&Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap()).unwrap()
        });
        assert!(rel_err(grad.data(), &numeric) < 1e-5, "{layer}");
    }
}

#[test]
fn conv2_node_sees_a_fourteen_pixel_square() {
    let net = Network::build(NetworkConfig::lenet(0)).unwrap();
    assert_eq!(net.required_input_shape("conv2").unwrap(), [1, 14, 14]);
    assert_eq!(net.required_input_shape("pool2").unwrap(), [1, 16, 16]);
    assert_eq!(net.required_input_shape("ip2").unwrap(), [1, 28, 28]);
    assert_eq!(net.param_count(), 431_080);
}

fn quadratic_config(eps: f64, steps: usize) -> HmcConfig {
    HmcConfig {
        sigma: 1.0,
        mass: 1.0,
        step_size: eps,
        leapfrog_steps: steps,
        iterations: 1,
        init: Init::Zero,
        metropolis: true,
        seed: 0,
        snapshots: tiltnet::hmc::SnapshotSchedule::Checkpoints,
    }
}

#[test]
fn leapfrog_retraces_its_path_under_momentum_flip() {
    let pot = GaussianPotential::new([2, 3], 1.3);
    let cfg = quadratic_config(0.07, 25);
    let mut rng = common::rng(21);
    let x = uniform_tensor(&mut rng, &[2, 3], 2.0);
    let phi = uniform_tensor(&mut rng, &[2, 3], 1.0);
    let start = ChainState::new(&pot, x.clone(), phi).unwrap();
    let mut end = leapfrog(&start, &pot, &cfg).unwrap();
    end.phi.scale(-1.0);
    let back = leapfrog(&end, &pot, &cfg).unwrap();
    assert!(common::max_abs_diff(back.x.data(), x.data()) < 1e-8);
}

#[test]
fn energy_error_shrinks_quadratically_with_step_size() {
    let pot = GaussianPotential::new([1], 1.0);
    let drift = |eps: f64, steps: usize| {
        let s = ChainState::new(&pot, Tensor::full([1], 1.0), Tensor::zeros([1])).unwrap();
        let e = leapfrog(&s, &pot, &quadratic_config(eps, steps)).unwrap();
        (e.hamiltonian(1.0) - s.hamiltonian(1.0)).abs()
    };
    let ratio = drift(0.1, 10) / drift(0.05, 20);
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn chains_are_reproducible_from_their_seed() {
    let net = Network::build(tiny_conv_config(3, 1)).unwrap();
    let node = net.truncate_at("ip1", 2).unwrap();
    let pot = NodePotential::new(node, 10.0);
    let cfg = HmcConfig {
        step_size: 0.05,
        leapfrog_steps: 10,
        iterations: 20,
        mass: 1.0,
        init: Init::Gaussian(1.0),
        seed: 77,
        ..HmcConfig::lenet()
    };
    let a = run_chain(&pot, &cfg).unwrap();
    let b = run_chain(&pot, &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_chain(&pot, &HmcConfig { seed: 78, ..cfg }).unwrap();
    assert_ne!(a.final_image(), c.final_image());
}

#[test]
fn rejected_proposals_keep_the_previous_state() {
    let pot = GaussianPotential::new([4], 1.0);
    // Near the stability limit the energy error is large and proposals often fail.
    let cfg = quadratic_config(1.99, 3);
    let mut rng = common::rng(3);
    let mut state = ChainState::new(&pot, Tensor::full([4], 1.0), Tensor::zeros([4])).unwrap();
    let x0 = state.x.clone();
    let mut rejected = 0;
    for _ in 0..20 {
        let (next, t) = hmc_iterate(state, &pot, &cfg, &mut rng).unwrap();
        if !t.accepted {
            rejected += 1;
            assert_eq!(next.x, x0);
        }
        state = next;
        if t.accepted {
            break;
        }
    }
    assert!(rejected > 0);
}
