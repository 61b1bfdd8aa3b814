use dcgn::attention::AttentionMode;
use dcgn::autograd::Graph;
use dcgn::networks::{sample_latent, AttnPlacement, Discriminator, Generator, NetworkConfig};
use dcgn::nn::ParamStore;
use dcgn::tensor::Tensor;
use dcgn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small() -> NetworkConfig {
    NetworkConfig {
        latent_dim: 8,
        image_size: 16,
        base_channels: 2,
        max_channels: 8,
        feature_dim: 6,
        ..NetworkConfig::default()
    }
}

fn placement(resolution: usize, mode: AttentionMode) -> Option<AttnPlacement> {
    Some(AttnPlacement {
        resolution,
        mode,
        patch_size: 3,
        heads: Some(1),
    })
}

fn siamese() -> NetworkConfig {
    NetworkConfig {
        d_attn: placement(4, AttentionMode::RefKeyQuery),
        ..small()
    }
}

/// Parameters of one block with `c` channels, patch 3, one head, counted
/// from the layer shapes.
fn attention_count(c: usize) -> usize {
    let w = 9 * c;
    3 * (c * c + c) + (w + c) * w + w + w * w + w
}

fn conv_count(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

/// Generic parameters: every entry, biases included, gets N(0, 0.3) added.
fn generic(store: &ParamStore, r: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let noise = Tensor::randn(t.shape(), 0.3, r);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        out.insert(name, Tensor::new(t.shape(), data).unwrap());
    }
    out
}

#[test]
fn generator_parameter_count_audit() {
    let c = small();
    // Channels: 16 -> 2, 8 -> 4, 4 -> 8.
    let expected =
        (8 * 16 * 8 + 16 * 8) + conv_count(3, 8, 8) + conv_count(3, 8, 4) + conv_count(3, 4, 2) + conv_count(1, 2, 3);
    let plain = Generator::new(&c).unwrap();
    assert_eq!(plain.param_count(), expected);
    assert_eq!(plain.init(&mut rng(0)).count(), expected);

    let with = Generator::new(&NetworkConfig {
        g_attn: placement(8, AttentionMode::SelfAttention),
        ..c
    })
    .unwrap();
    assert_eq!(with.param_count() - plain.param_count(), attention_count(4));
    assert_eq!(with.init(&mut rng(0)).count(), with.param_count());
}

#[test]
fn attention_changes_generator_output() {
    let c = small();
    let z = sample_latent(2, 8, &mut rng(1));
    let plain = Generator::new(&c).unwrap();
    let with = Generator::new(&NetworkConfig {
        g_attn: placement(8, AttentionMode::SelfAttention),
        ..c
    })
    .unwrap();
    let a = plain.generate(&plain.init(&mut rng(2)), &z).unwrap();
    let b = with
        .generate(&generic(&with.init(&mut rng(2)), &mut rng(3)), &z)
        .unwrap();
    assert_ne!(a, b);
}

#[test]
fn discriminator_parameter_count_audit() {
    let c = small();
    // from_rgb 3 -> 2; conv16 2 -> 4; conv8 4 -> 8; conv4 8 -> 8; fc 128 -> 6; out 6 -> 1.
    let expected =
        conv_count(1, 3, 2) + conv_count(3, 2, 4) + conv_count(3, 4, 8) + conv_count(3, 8, 8) + (128 * 6 + 6) + 7;
    let plain = Discriminator::new(&c).unwrap();
    assert_eq!(plain.param_count(), expected);
    let sd = Discriminator::new(&siamese()).unwrap();
    assert_eq!(sd.param_count() - plain.param_count(), attention_count(8));
    assert_eq!(sd.init(&mut rng(0)).count(), sd.param_count());
    let selfd = Discriminator::new(&NetworkConfig {
        d_attn: placement(8, AttentionMode::SelfAttention),
        ..small()
    })
    .unwrap();
    assert_eq!(selfd.param_count() - plain.param_count(), attention_count(8));
}

#[test]
fn siamese_with_zero_fusion_mlp_equals_plain_discriminator() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let plain = Discriminator::new(&small()).unwrap();
    let params = generic(&sd.init(&mut rng(4)), &mut rng(5)).map_values(|name, t| {
        if name.starts_with("d.attn.head") {
            Tensor::zeros(t.shape())
        } else {
            t.clone()
        }
    });
    let x = Tensor::uniform(&[3, 16, 16, 3], -1.0, 1.0, &mut rng(6));
    let refs = Tensor::uniform(&[3, 16, 16, 3], -1.0, 1.0, &mut rng(7));
    let (ls, fs) = sd.evaluate(&params, &x, Some(&refs)).unwrap();
    let (lp, fp) = plain.evaluate(&params, &x, None).unwrap();
    assert_eq!(ls, lp);
    assert_eq!(fs, fp);
}

#[test]
fn permuting_references_changes_logits() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let params = generic(&sd.init(&mut rng(8)), &mut rng(9));
    let x = Tensor::uniform(&[4, 16, 16, 3], -1.0, 1.0, &mut rng(10));
    let refs = Tensor::uniform(&[4, 16, 16, 3], -1.0, 1.0, &mut rng(11));
    let (a, _) = sd.evaluate(&params, &x, Some(&refs)).unwrap();
    let shuffled = refs.gather_first(&[1, 2, 3, 0]).unwrap();
    let (b, _) = sd.evaluate(&params, &x, Some(&shuffled)).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p != q));
}

#[test]
fn self_pairing_is_legal() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let params = generic(&sd.init(&mut rng(12)), &mut rng(13));
    let x = Tensor::uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut rng(14));
    let (l, f) = sd.evaluate(&params, &x, Some(&x)).unwrap();
    assert!(l.is_finite() && f.is_finite());
}

#[test]
fn branches_share_one_encoder() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let params = generic(&sd.init(&mut rng(15)), &mut rng(16));
    let x = Tensor::uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut rng(17));
    let e1 = sd.encode(&params, &x).unwrap();
    assert_eq!(e1.shape(), &[2, 4, 4, 8]);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let (xa, xb) = (g.constant(x.clone()), g.constant(x.clone()));
    let (l, _) = sd.forward(&mut g, &p, xa, Some(xb)).unwrap();
    let (l2, _) = sd.evaluate(&params, &x, Some(&x)).unwrap();
    assert_eq!(g.value(l), &l2);

    // Updating a trunk weight moves both branch encodings identically.
    let mut moved = params.clone();
    let w = moved.get("d.conv8.weight").unwrap().map(|v| v * 1.5);
    moved.insert("d.conv8.weight", w);
    let e2 = sd.encode(&moved, &x).unwrap();
    assert_ne!(e1, e2);
    let (la, _) = sd.evaluate(&moved, &x, Some(&x)).unwrap();
    let (lb, _) = sd.evaluate(&moved, &x, Some(&x)).unwrap();
    assert_eq!(la, lb);
    assert!(!params.names().any(|n| n.contains("ref") || n.contains("branch")));
}

#[test]
fn gradients_reach_primary_and_reference() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let params = generic(&sd.init(&mut rng(18)), &mut rng(19));
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.param(Tensor::uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut rng(20)));
    let r = g.param(Tensor::uniform(&[2, 16, 16, 3], -1.0, 1.0, &mut rng(21)));
    let (l, _) = sd.forward(&mut g, &p, x, Some(r)).unwrap();
    let s = g.sum_all(l).unwrap();
    let grads = g.backward(s).unwrap();
    for v in [x, r] {
        let gv = grads.get(v).expect("gradient present");
        assert!(gv.data().iter().any(|&d| d != 0.0));
    }
}

#[test]
fn siamese_contracts() {
    let sd = Discriminator::new(&siamese()).unwrap();
    let params = sd.init(&mut rng(22));
    let x = Tensor::zeros(&[2, 16, 16, 3]);
    assert!(matches!(sd.evaluate(&params, &x, None), Err(Error::Contract(_))));
    let wrong = Tensor::zeros(&[3, 16, 16, 3]);
    assert!(matches!(sd.evaluate(&params, &x, Some(&wrong)), Err(Error::Shape(_))));
    let plain = Discriminator::new(&small()).unwrap();
    assert!(matches!(
        plain.evaluate(&plain.init(&mut rng(0)), &x, Some(&x)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn same_seed_same_outputs() {
    let c = NetworkConfig {
        g_attn: placement(16, AttentionMode::SelfAttention),
        ..siamese()
    };
    let gen = Generator::new(&c).unwrap();
    let z = sample_latent(2, 8, &mut rng(23));
    let a = gen.generate(&gen.init(&mut rng(24)), &z).unwrap();
    let b = gen.generate(&gen.init(&mut rng(24)), &z).unwrap();
    assert_eq!(a, b);
    let d = Discriminator::new(&c).unwrap();
    let (la, _) = d.evaluate(&d.init(&mut rng(25)), &a, Some(&b)).unwrap();
    let (lb, _) = d.evaluate(&d.init(&mut rng(25)), &a, Some(&b)).unwrap();
    assert_eq!(
        la.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        lb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
