"""Flow tests: integrator, Hutchinson estimates, invertibility, likelihood."""

import math

import numpy as np
import pytest
from conftest import perturb_store, prepared_toy_dataset

from confflow import autodiff as ad
from confflow.flow import (
    ActNorm,
    CnfBlock,
    ConfFlow,
    DegenerateScaleError,
    FlowState,
    IntegrationError,
    LOG_2PI,
    ModelConfig,
    SolverConfig,
    gaussian_log_density,
    hutchinson_estimates,
    integrate,
    pointwise_log_density,
    rk45_step,
)
from confflow.molgraph import (
    AtomAttributes,
    Conformation,
    MolecularGraph,
    compute_feature_stats,
)


def small_model(stats, flow_layers=3, point_blocks=2, rounds=1, embed_dim=8,
                hidden=8, seed=0, rtol=1e-3, atol=1e-3):
    config = ModelConfig(flow_layers=flow_layers, point_blocks=point_blocks,
                         message_rounds=rounds, embed_dim=embed_dim,
                         hidden_dim=hidden, rtol=rtol, atol=atol,
                         init_seed=seed)
    return ConfFlow(config, stats)


def single_atom_setup(seed=0, perturb=0.0):
    atom = AtomAttributes(atomic_number=6, hybridization="sp3", degree=0,
                          formal_charge=0, total_h=0, implicit_valence=1,
                          total_valence=1, radical_electrons=0)
    graph = MolecularGraph("lone", (atom,), ())
    conf = Conformation.for_graph(graph, np.zeros((1, 3)))
    stats = compute_feature_stats([(graph, [conf])])
    model = small_model(stats, point_blocks=1, embed_dim=4, hidden=8, seed=seed)
    if perturb:
        perturb_store(model.params, np.random.default_rng(seed + 1), perturb)
    model.mark_initialized()
    return graph, model


def toy_model_setup(seed=0, perturb=0.25, templates=("chain-5",), **kw):
    dataset, stats = prepared_toy_dataset(templates=templates, conformers=2,
                                          seed=seed)
    model = small_model(stats, **kw)
    if perturb:
        perturb_store(model.params, np.random.default_rng(seed + 100), perturb)
    model.mark_initialized()
    return dataset, model


# ---------------------------------------------------------------------------
# integrator


def scalar_rhs(fn):
    def rhs(state, t):
        return [fn(state[0], t)]
    return rhs


def test_rk45_zero_dynamics_is_identity():
    state = [ad.constant(np.array([[1.0, -2.0, 3.0]]))]
    rhs = scalar_rhs(lambda z, t: ad.scalar_mul(z, 0.0))
    new_state, errors = rk45_step(rhs, state, 0.0, 0.5)
    assert np.array_equal(new_state[0].data, state[0].data)
    assert np.abs(errors[0]).max() == 0.0


def test_rk45_exponential_growth():
    state = [ad.constant(np.array([[1.0]]))]
    rhs = scalar_rhs(lambda z, t: z)
    final, steps = integrate(rhs, state, 0.0, 1.0,
                             SolverConfig(rtol=1e-3, atol=1e-3))
    assert abs(final[0].item() - math.e) < 1e-3
    assert steps >= 1


def test_rk45_decay_round_trip():
    rhs = scalar_rhs(lambda z, t: ad.neg(z))
    start = [ad.constant(np.array([[1.0]]))]
    solver = SolverConfig(rtol=1e-3, atol=1e-3)
    mid, _ = integrate(rhs, start, 0.0, 1.0, solver)
    back, _ = integrate(rhs, mid, 1.0, 0.0, solver)
    assert abs(back[0].item() - 1.0) < 5e-3


def test_fixed_step_is_deterministic():
    rhs = scalar_rhs(lambda z, t: ad.scalar_mul(z, -0.7))
    solver = SolverConfig(fixed_step=True, step_count=16)
    runs = []
    for _ in range(2):
        final, steps = integrate(rhs, [ad.constant(np.array([[2.0]]))],
                                 0.0, 1.0, solver)
        assert steps == 16
        runs.append(final[0].item())
    assert runs[0] == runs[1]


def test_integrate_max_steps_guard():
    # oscillator stiff enough to need many steps at a tight tolerance
    def rhs(state, t):
        return [ad.scalar_mul(state[0], 200.0)]
    with pytest.raises(IntegrationError):
        integrate(rhs, [ad.constant(np.array([[1.0]]))], 0.0, 50.0,
                  SolverConfig(rtol=1e-10, atol=1e-10, max_steps=5))


def test_flow_state_initial_invariant():
    st = FlowState.initial(ad.constant(np.zeros((2, 3))), t=0.0)
    assert st.dlogp.item() == st.ke.item() == st.jf.item() == 0.0


# ---------------------------------------------------------------------------
# hutchinson


def test_hutchinson_identity_jacobian_exact():
    rng = np.random.default_rng(0)
    for m in (1, 4):
        eps = rng.choice((-1.0, 1.0), size=(m, 3))
        with ad.Tape() as tape:
            z = ad.Tensor(rng.normal(size=(m, 3)))
            f = ad.add(z, ad.constant(np.zeros((m, 3))))
            tr, fro = hutchinson_estimates(tape, f, z, ad.constant(eps))
        assert tr.item() == pytest.approx(3 * m, abs=1e-12)
        assert fro.item() == pytest.approx(3 * m, abs=1e-12)


def test_hutchinson_doubling_exact():
    rng = np.random.default_rng(1)
    m = 3
    eps = rng.choice((-1.0, 1.0), size=(m, 3))
    with ad.Tape() as tape:
        z = ad.Tensor(rng.normal(size=(m, 3)))
        f = ad.scalar_mul(z, 2.0)
        tr, fro = hutchinson_estimates(tape, f, z, ad.constant(eps))
    assert tr.item() == pytest.approx(2 * 3 * m, abs=1e-12)
    assert fro.item() == pytest.approx(4 * 3 * m, abs=1e-12)


def test_hutchinson_mean_matches_dense_oracle():
    rng = np.random.default_rng(2)
    b = rng.normal(size=(2, 2)) * 0.7
    a = rng.normal(size=(3, 3)) * 0.7

    def build(z):
        return ad.matmul(ad.constant(b), ad.matmul(z, ad.constant(a)))

    z0 = rng.normal(size=(2, 3))
    # dense Jacobian, row by row, from basis cotangents
    jac = np.zeros((6, 6))
    with ad.Tape() as tape:
        z = ad.Tensor(z0.copy())
        f = build(z)
        for r in range(6):
            basis = np.zeros((2, 3))
            basis.flat[r] = 1.0
            jac[r] = ad.vjp(tape, f, ad.constant(basis), z).data.ravel()
    exact_trace = float(np.trace(jac))
    exact_frob = float(np.sum(jac * jac))

    total_tr = total_fro = 0.0
    n = 20_000
    with ad.Tape() as tape:
        z = ad.Tensor(z0.copy())
        f = build(z)
        for _ in range(n):
            eps = ad.constant(rng.choice((-1.0, 1.0), size=(2, 3)))
            tr, fro = hutchinson_estimates(tape, f, z, eps)
            total_tr += tr.item()
            total_fro += fro.item()
    assert abs(total_tr / n - exact_trace) < 0.01 * abs(exact_trace)
    assert abs(total_fro / n - exact_frob) < 0.01 * exact_frob


# ---------------------------------------------------------------------------
# actnorm


def test_actnorm_identity():
    act = ActNorm(ad.ParameterStore(), "a")
    z = ad.constant(np.random.default_rng(3).normal(size=(4, 3)))
    out, logdet = act.forward(z)
    assert np.array_equal(out.data, z.data)
    assert logdet.item() == 0.0


def test_actnorm_logdet_hand_value():
    act = ActNorm(ad.ParameterStore(), "a")
    act.log_scale.data = np.full((1, 3), math.log(2.0))
    z = ad.constant(np.zeros((4, 3)))
    _, logdet = act.forward(z)
    assert logdet.item() == pytest.approx(4 * 3 * math.log(2.0), abs=1e-12)


def test_actnorm_roundtrip_exact():
    act = ActNorm(ad.ParameterStore(), "a")
    rng = np.random.default_rng(4)
    act.log_scale.data = rng.normal(size=(1, 3)) * 0.3
    act.shift.data = rng.normal(size=(1, 3))
    z = ad.constant(rng.normal(size=(6, 3)))
    mid, ld_f = act.forward(z)
    back, ld_i = act.inverse(mid)
    assert np.abs(back.data - z.data).max() < 1e-12
    assert ld_f.item() == ld_i.item()  # both report the forward-map logdet


def test_actnorm_data_initialization():
    act = ActNorm(ad.ParameterStore(), "a")
    rng = np.random.default_rng(5)
    coords = rng.normal(loc=1.5, scale=2.0, size=(400, 3))
    act.initialize_from(coords)
    out, _ = act.inverse(ad.constant(coords))
    assert np.abs(out.data.mean(axis=0)).max() < 1e-10
    assert np.abs(out.data.std(axis=0) - 1.0).max() < 1e-10


def test_actnorm_degenerate_scale_error():
    act = ActNorm(ad.ParameterStore(), "a")
    act.log_scale.data = np.array([[0.0, 0.0, -20.0]])
    with pytest.raises(DegenerateScaleError):
        act.forward(ad.constant(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# cnf blocks


class _ConstantDynamics:
    """Rigged field f(Z) = c: zero Jacobian, known closed-form transport."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def eval(self, ctx, hv0, he0, z, t):
        return ad.add(ad.scalar_mul(z, 0.0), ad.constant(self.c))


class _FakeCtx:
    molecule_id = "rig"


def test_cnf_constant_dynamics_closed_form():
    c = np.array([[0.3, -0.2, 0.5]])
    block = CnfBlock(_ConstantDynamics(c), (0.0, 1.0), SolverConfig())
    z = ad.constant(np.array([[1.0, 1.0, 1.0]]))
    probe = np.ones((1, 3))
    out, dlogp, ke, jf = block.transform(_FakeCtx(), None, None, z, "forward",
                                         probe=probe)
    assert np.abs(out.data - (z.data + c)).max() < 1e-9
    assert abs(dlogp.item()) < 1e-12
    assert ke.item() == pytest.approx(float(np.sum(c * c)), abs=1e-9)
    assert jf.item() == pytest.approx(0.0, abs=1e-12)


def test_cnf_constant_dynamics_inverse_subtracts():
    c = np.array([[0.3, -0.2, 0.5]])
    block = CnfBlock(_ConstantDynamics(c), (0.0, 1.0), SolverConfig())
    z = ad.constant(np.zeros((1, 3)))
    out, _, ke, _ = block.transform(_FakeCtx(), None, None, z, "inverse",
                                    probe=np.ones((1, 3)))
    assert np.abs(out.data - (z.data - c)).max() < 1e-9
    assert ke.item() == pytest.approx(float(np.sum(c * c)), abs=1e-9)


def test_cnf_identity_at_init():
    dataset, model = toy_model_setup(perturb=0.0)
    graph = dataset[0][0]
    ctx = model.context(graph)
    rng = np.random.default_rng(6)
    z = rng.normal(size=(ctx.num_atoms, 3))
    probes = model.draw_probes(ctx.num_atoms, rng)
    x, logdet, ke, jf = model.forward_latent(ctx, ad.constant(z), probes=probes)
    assert np.abs(x.data - z).max() < 1e-8
    assert abs(logdet.item()) < 1e-8
    assert abs(ke.item()) < 1e-8 and abs(jf.item()) < 1e-8


def test_model_roundtrip_error_shrinks_with_tolerance():
    # near-init regime: the tolerance, not field stiffness, limits the error
    dataset, model = toy_model_setup(perturb=0.1)
    graph = dataset[0][0]
    ctx = model.context(graph)
    rng = np.random.default_rng(7)
    z = rng.normal(size=(ctx.num_atoms, 3))
    probes = model.draw_probes(ctx.num_atoms, rng)

    for rtol, bound in ((1e-3, 2e-3), (1e-8, 1e-6)):
        solver = SolverConfig(rtol=rtol, atol=rtol)
        x, _, _, _ = model.forward_latent(ctx, ad.constant(z), probes=probes,
                                          solver=solver)
        back, _, _, _ = model.inverse_data(ctx, x, probes, solver=solver)
        assert np.abs(back.data - z).max() < bound


# ---------------------------------------------------------------------------
# likelihood and sampling


def test_identity_model_nll_at_origin():
    graph, model = single_atom_setup()
    conf = Conformation.for_graph(graph, np.zeros((1, 3)))
    nll = model.log_likelihood(graph, conf)
    assert nll == pytest.approx(0.5 * LOG_2PI, abs=1e-8)


def test_identity_model_nll_single_atom_hand_value():
    graph, model = single_atom_setup()
    conf = Conformation.for_graph(graph, np.array([[1.0, 0.0, 0.0]]))
    want = (3 * 0.5 * LOG_2PI + 0.5) / 3.0
    assert model.log_likelihood(graph, conf) == pytest.approx(want, abs=1e-6)


def test_two_direction_likelihood_consistency():
    dataset, model = toy_model_setup(perturb=0.1)
    graph, confs = dataset[0]
    ctx = model.context(graph)
    rng = np.random.default_rng(8)
    probes = model.draw_probes(ctx.num_atoms, rng)
    x = ad.constant(confs[0].coords - confs[0].coords.mean(axis=0))

    z, logdet_inv, _, _ = model.inverse_data(ctx, x, probes)
    logp_inv = gaussian_log_density(z).item() - logdet_inv.item()

    x2, logdet_fwd, _, _ = model.forward_latent(ctx, ad.constant(z.data),
                                                probes=probes)
    logp_fwd = gaussian_log_density(ad.constant(z.data)).item() - logdet_fwd.item()
    dim = 3.0 * ctx.num_atoms
    assert abs(logp_inv - logp_fwd) / dim < 5e-3
    assert np.abs(x2.data - x.data).max() < 5e-3


def test_sampling_identity_model_returns_gaussian_draws():
    dataset, model = toy_model_setup(perturb=0.0)
    graph = dataset[0][0]
    m = graph.atom_count
    samples, failures = model.sample(graph, 3, seed=11)
    assert not failures and len(samples) == 3
    rng = np.random.default_rng(11)
    for s in samples:
        want = rng.standard_normal((m, 3))
        assert np.abs(s.coords - want).max() < 1e-12


def test_sampling_zero_count_and_determinism():
    dataset, model = toy_model_setup(perturb=0.2)
    graph = dataset[0][0]
    empty, failures = model.sample(graph, 0, seed=5)
    assert empty == [] and failures == []
    a, _ = model.sample(graph, 2, seed=5)
    b, _ = model.sample(graph, 2, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.coords, y.coords)


def test_checkpoint_roundtrip(tmp_path):
    dataset, model = toy_model_setup(perturb=0.2)
    graph, confs = dataset[0]
    path = tmp_path / "model.json"
    model.save(path)
    clone = ConfFlow.load(path)
    assert clone.params.names() == model.params.names()
    for name, t in model.params.items():
        assert np.array_equal(t.data, clone.params[name].data)
    nll_a = model.log_likelihood(graph, confs[0], probe_seed=3)
    nll_b = clone.log_likelihood(graph, confs[0], probe_seed=3)
    assert nll_a == nll_b


def test_pointwise_density_integrates_to_one():
    # coarse-grid version; the acceptance suite runs the full fine grid.
    # the rig must stay gentle enough that no mass escapes the box
    graph, model = single_atom_setup(seed=2, perturb=0.1)
    rng = np.random.default_rng(3)
    for act in model.actnorms:
        act.log_scale.data = rng.normal(size=(1, 3)) * 0.05
        act.shift.data = rng.normal(size=(1, 3)) * 0.1
    step = 0.4
    axis = np.arange(-5.0, 5.0 + 1e-9, step)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"),
                    axis=-1).reshape(-1, 3)
    logp = pointwise_log_density(model, graph, grid)
    total = float(np.exp(logp).sum()) * step ** 3
    assert abs(total - 1.0) < 5e-2
