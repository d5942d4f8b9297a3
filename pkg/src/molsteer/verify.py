"""Structural verification suites: symmetry, gradients, marginals, chemistry.

These checks test properties the architecture must guarantee regardless of
training state (fresh random parameters pass them all), so they double as
oracles for the test suite and as a field diagnostic via the command line.
All model checks run in 64-bit with explicit generators; tolerances are
carried in the results so reports are self-describing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .autoencoder import AutoencoderConfig, LatentPrior, SubstructureAutoencoder
from .chem.bonds import BondGraph
from .chem.graphs import EMPTY_SCAFFOLD_DIGEST, canonical_hash, murcko_scaffold, ring_count
from .chem.metrics import compute_metrics
from .diffusion import (
    ConditionalDenoiser,
    build_condition,
    denoise_step,
    draw_sample_noise,
    make_schedule,
    q_sample,
    sample,
)
from .egnn import EgnnConfig, gradient_check, project_zero_cog
from .geometry import FeatureScaler, molecule_from_atoms, random_rotation
from .training import (
    BoundProbe,
    NoiseBundle,
    PreparedPair,
    total_loss,
    variational_bound_diagnostic,
)

SUITES = ("equivariance", "invariance", "gradients", "marginal", "chemistry", "zero_cog")


@dataclass(frozen=True)
class CheckResult:
    """One verification outcome; ``value`` is the measured quantity."""

    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def _result(name: str, value: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(
        name=name, passed=value <= tolerance, value=value, tolerance=tolerance, detail=detail
    )


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.detail}" if r.detail else ""
        lines.append(f"{status}  {r.name}  value={r.value:.3e} tol={r.tolerance:.3e}{extra}")
    return "\n".join(lines)


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)


# Small 64-bit models: symmetry properties hold at any width or depth, so
# verification uses fast ones.
_HIDDEN = 32
_ALPHABET = ("H", "C", "N", "O", "F")


def _models(
    seed: int,
) -> tuple[SubstructureAutoencoder, ConditionalDenoiser]:
    torch.manual_seed(seed)
    ae_config = AutoencoderConfig(
        encoder=EgnnConfig(num_layers=1, hidden_dim=_HIDDEN),
        decoder=EgnnConfig(num_layers=2, hidden_dim=_HIDDEN),
    )
    autoencoder = SubstructureAutoencoder(ae_config, alphabet_size=len(_ALPHABET))
    denoiser = ConditionalDenoiser(
        EgnnConfig(num_layers=2, hidden_dim=_HIDDEN),
        feature_dim=len(_ALPHABET) + 1,
        prior_feat_dim=ae_config.latent_feat_dim,
    )
    autoencoder.to(torch.float64)
    denoiser.to(torch.float64)
    return autoencoder, denoiser


def _random_molecule_tensors(rng: np.random.Generator, n: int, alphabet: int = 5):
    coords = torch.as_tensor(rng.standard_normal((n, 3)) * 1.5, dtype=torch.float64)
    feats = torch.zeros((n, alphabet + 1), dtype=torch.float64)
    for i in range(n):
        feats[i, int(rng.integers(0, alphabet))] = 1.0
        feats[i, -1] = float(rng.integers(-1, 2))
    return coords, feats


def _rotate(tensor: torch.Tensor, rotation: np.ndarray) -> torch.Tensor:
    r = torch.as_tensor(rotation, dtype=tensor.dtype)
    return tensor @ r.T


def _max_dev(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).detach().abs().max())


def check_equivariance(seed: int = 0, trials: int = 50) -> list[CheckResult]:
    """Rotate-then-evaluate equals evaluate-then-rotate for every stage."""
    rng = np.random.default_rng(seed)
    autoencoder, denoiser = _models(seed)
    schedule = make_schedule(100, "polynomial")
    n_sub, n_mol = 4, 7
    sub_coords, sub_feats = _random_molecule_tensors(rng, n_sub)
    gen = torch.Generator().manual_seed(seed)
    prior = autoencoder.encode(sub_coords, sub_feats, generator=gen)
    state_coords = project_zero_cog(torch.randn(n_mol, 3, dtype=torch.float64, generator=gen))
    state_feats = torch.randn(n_mol, 6, dtype=torch.float64, generator=gen)
    virtual = torch.randn(n_mol - n_sub, 3, dtype=torch.float64, generator=gen)
    step_noise_c = torch.randn(n_mol, 3, dtype=torch.float64, generator=gen)
    step_noise_f = torch.randn(n_mol, 6, dtype=torch.float64, generator=gen)

    worst = {"encoder": 0.0, "decoder": 0.0, "denoiser": 0.0, "denoise_step": 0.0}
    t = 40
    for _ in range(trials):
        rotation = random_rotation(rng)
        shift = torch.as_tensor(rng.standard_normal(3) * 2.0, dtype=torch.float64)

        base_c, base_f = autoencoder.encode_mean(sub_coords, sub_feats)
        moved_c, moved_f = autoencoder.encode_mean(_rotate(sub_coords, rotation) + shift, sub_feats)
        worst["encoder"] = max(
            worst["encoder"],
            _max_dev(moved_c, _rotate(base_c, rotation)),
            _max_dev(moved_f, base_f),
        )

        rot_prior = LatentPrior(coords=_rotate(prior.coords, rotation), feats=prior.feats)
        out_c, logits, charge = autoencoder.decode(prior, n_mol, virtual_noise=virtual)
        rot_c, rot_logits, rot_charge = autoencoder.decode(
            rot_prior, n_mol, virtual_noise=_rotate(virtual, rotation)
        )
        worst["decoder"] = max(
            worst["decoder"],
            _max_dev(rot_c, _rotate(out_c, rotation)),
            _max_dev(rot_logits, logits),
            _max_dev(rot_charge, charge),
        )

        eps_c, eps_f = denoiser.predict(
            build_condition(state_coords, state_feats, t, prior, schedule)
        )
        eps_c2, eps_f2 = denoiser.predict(
            build_condition(_rotate(state_coords, rotation), state_feats, t, rot_prior, schedule)
        )
        worst["denoiser"] = max(
            worst["denoiser"], _max_dev(eps_c2, _rotate(eps_c, rotation)), _max_dev(eps_f2, eps_f)
        )

        step_c, step_f = denoise_step(
            state_coords, state_feats, t, prior, schedule, denoiser, step_noise_c, step_noise_f
        )
        step_c2, step_f2 = denoise_step(
            _rotate(state_coords, rotation),
            state_feats,
            t,
            rot_prior,
            schedule,
            denoiser,
            _rotate(step_noise_c, rotation),
            step_noise_f,
        )
        worst["denoise_step"] = max(
            worst["denoise_step"],
            _max_dev(step_c2, _rotate(step_c, rotation)),
            _max_dev(step_f2, step_f),
        )

    results = [
        _result(f"equivariance/{name}", value, 1e-5, f"{trials} transforms")
        for name, value in worst.items()
    ]

    # Full reverse chain: sampling with a rotated prior and rotated noise
    # must give the rotated molecule, same atom types.
    noise = draw_sample_noise(n_mol, 6, schedule, torch.Generator().manual_seed(seed + 1), torch.float64)
    rotation = random_rotation(rng)
    rot_noise = replace(
        noise,
        initial_coords=_rotate(noise.initial_coords, rotation),
        step_coords={t: _rotate(v, rotation) for t, v in noise.step_coords.items()},
    )
    scaler = FeatureScaler()
    mol = sample(prior, n_mol, schedule, denoiser, scaler, _ALPHABET, noise=noise)
    rot_prior = LatentPrior(coords=_rotate(prior.coords, rotation), feats=prior.feats)
    mol_rot = sample(rot_prior, n_mol, schedule, denoiser, scaler, _ALPHABET, noise=rot_noise)
    coord_dev = float(np.abs(mol_rot.coords - mol.coords @ rotation.T).max())
    type_mismatches = float(np.abs(mol_rot.features - mol.features).max())
    results.append(
        _result("equivariance/sampling_trajectory", coord_dev, 1e-4, f"T={schedule.steps}")
    )
    results.append(_result("equivariance/sampling_types", type_mismatches, 0.0))
    return results


def _pair_tensors(rng: np.random.Generator, n_mol: int, index_map: tuple[int, ...]):
    mol_coords, mol_feats = _random_molecule_tensors(rng, n_mol)
    mol_coords = project_zero_cog(mol_coords)
    rows = list(index_map)
    return PreparedPair(
        mol_coords=mol_coords,
        mol_feats=mol_feats,
        sub_coords=mol_coords[rows].clone(),
        sub_feats=mol_feats[rows].clone(),
        index_map=index_map,
        label="verify",
    )


def _full_bundle(rng: np.random.Generator, pair: PreparedPair, latent_dim: int, steps: int):
    def randn(*shape: int) -> torch.Tensor:
        return torch.as_tensor(rng.standard_normal(shape), dtype=torch.float64)

    n_mol = pair.mol_coords.shape[0]
    n_sub = pair.sub_coords.shape[0]
    return NoiseBundle(
        encoder_coords=randn(n_sub, 3),
        encoder_feats=randn(n_sub, latent_dim),
        virtual_coords=randn(n_mol - n_sub, 3) if n_mol > n_sub else None,
        step=int(rng.integers(2, steps + 1)),
        eps_coords=randn(n_mol, 3),
        eps_feats=randn(n_mol, pair.mol_feats.shape[1]),
    )


def _transform_pair(pair: PreparedPair, rotation: np.ndarray, shift: torch.Tensor) -> PreparedPair:
    moved = _rotate(pair.mol_coords, rotation) + shift
    rows = list(pair.index_map)
    return replace(pair, mol_coords=moved, sub_coords=moved[rows].clone())


def _transform_bundle(bundle: NoiseBundle, rotation: np.ndarray) -> NoiseBundle:
    return replace(
        bundle,
        encoder_coords=_rotate(bundle.encoder_coords, rotation),
        virtual_coords=(
            _rotate(bundle.virtual_coords, rotation) if bundle.virtual_coords is not None else None
        ),
        eps_coords=_rotate(bundle.eps_coords, rotation),
    )


def check_invariance(seed: int = 0, trials: int = 50) -> list[CheckResult]:
    """Matched-noise rigid motions leave every loss value unchanged."""
    rng = np.random.default_rng(seed)
    autoencoder, denoiser = _models(seed)
    schedule = make_schedule(100, "polynomial")
    pair = _pair_tensors(rng, 6, (0, 2, 3, 5))
    latent = autoencoder.config.latent_feat_dim
    bundle = _full_bundle(rng, pair, latent, schedule.steps)

    base = total_loss(autoencoder, denoiser, schedule, pair, bundle=bundle)
    probes = [
        BoundProbe(
            step=s,
            eps_coords=torch.as_tensor(rng.standard_normal((6, 3)), dtype=torch.float64),
            eps_feats=torch.as_tensor(rng.standard_normal((6, 6)), dtype=torch.float64),
        )
        for s in (1, 13, 57, 100)
    ]
    prior = autoencoder.encode(
        pair.sub_coords,
        pair.sub_feats,
        noise_coords=bundle.encoder_coords,
        noise_feats=bundle.encoder_feats,
    )
    clean_coords = pair.mol_coords * autoencoder.scaler.coord_weight
    clean_feats = autoencoder.scale_feats(pair.mol_feats)
    base_bound = variational_bound_diagnostic(
        denoiser, prior, clean_coords, clean_feats, schedule, probes
    )

    worst_ae = worst_total = worst_bound = 0.0
    for _ in range(trials):
        rotation = random_rotation(rng)
        shift = torch.as_tensor(rng.standard_normal(3) * 2.0, dtype=torch.float64)
        moved_pair = _transform_pair(pair, rotation, shift)
        moved_bundle = _transform_bundle(bundle, rotation)
        moved = total_loss(autoencoder, denoiser, schedule, moved_pair, bundle=moved_bundle)
        worst_ae = max(worst_ae, _max_dev(moved["autoencoder"], base["autoencoder"]))
        worst_total = max(worst_total, _max_dev(moved["total"], base["total"]))

        moved_prior = autoencoder.encode(
            moved_pair.sub_coords,
            moved_pair.sub_feats,
            noise_coords=moved_bundle.encoder_coords,
            noise_feats=moved_bundle.encoder_feats,
        )
        moved_probes = [
            replace(p, eps_coords=_rotate(p.eps_coords, rotation)) for p in probes
        ]
        moved_bound = variational_bound_diagnostic(
            denoiser,
            moved_prior,
            moved_pair.mol_coords * autoencoder.scaler.coord_weight,
            clean_feats,
            schedule,
            moved_probes,
        )
        worst_bound = max(worst_bound, abs(moved_bound - base_bound))

    return [
        _result("invariance/autoencoder_loss", worst_ae, 1e-5, f"{trials} transforms"),
        _result("invariance/total_loss", worst_total, 1e-5, f"{trials} transforms"),
        _result("invariance/bound_diagnostic", worst_bound, 1e-5, f"{trials} transforms"),
    ]


def check_gradients(seed: int = 0) -> list[CheckResult]:
    """Autograd against central finite differences on a small instance."""
    rng = np.random.default_rng(seed)
    autoencoder, denoiser = _models(seed)
    schedule = make_schedule(50, "polynomial")
    pair = _pair_tensors(rng, 4, (0, 1, 3))
    latent = autoencoder.config.latent_feat_dim
    bundle = _full_bundle(rng, pair, latent, schedule.steps)

    def ae_loss() -> torch.Tensor:
        return total_loss(autoencoder, denoiser, schedule, pair, bundle=bundle)["autoencoder"]

    def diff_loss() -> torch.Tensor:
        return total_loss(autoencoder, denoiser, schedule, pair, bundle=bundle)["diffusion"]

    def joint_loss() -> torch.Tensor:
        return total_loss(autoencoder, denoiser, schedule, pair, bundle=bundle)["total"]

    ae_params = list(autoencoder.parameters())
    all_params = ae_params + list(denoiser.parameters())
    results = [
        _result(
            "gradients/autoencoder_loss",
            gradient_check(ae_loss, ae_params, seed=seed),
            1e-3,
            "relative, central differences",
        ),
        _result(
            "gradients/diffusion_loss",
            gradient_check(diff_loss, all_params, seed=seed),
            1e-3,
            "relative, central differences",
        ),
        _result(
            "gradients/total_loss",
            gradient_check(joint_loss, all_params, seed=seed),
            1e-3,
            "relative, central differences",
        ),
    ]
    return results


def check_marginal(seed: int = 0, draws: int = 100_000) -> list[CheckResult]:
    """Forward-process sample moments against the closed form, in z-scores."""
    gen = torch.Generator().manual_seed(seed)
    schedule = make_schedule(100, "polynomial")
    n, d = 5, 6
    clean_coords = project_zero_cog(torch.randn(n, 3, dtype=torch.float64, generator=gen))
    clean_feats = torch.randn(n, d, dtype=torch.float64, generator=gen)
    results = []
    for t in (1, schedule.steps // 2, schedule.steps):
        eps_c = torch.randn(draws, n, 3, dtype=torch.float64, generator=gen)
        eps_f = torch.randn(draws, n, d, dtype=torch.float64, generator=gen)
        tiled_c = clean_coords.expand(draws, n, 3)
        tiled_f = clean_feats.expand(draws, n, d)
        noisy_c, noisy_f = q_sample(tiled_c, tiled_f, t, schedule, eps_c, eps_f)

        signal = schedule.signal(t)
        var = schedule.sigma(t) ** 2
        var_c = var * (1.0 - 1.0 / n)
        worst = 0.0
        for sample_block, mean_true, var_true in (
            (noisy_c, signal * clean_coords, var_c),
            (noisy_f, signal * clean_feats, var),
        ):
            m = sample_block.mean(dim=0)
            v = sample_block.var(dim=0, unbiased=True)
            se_mean = math.sqrt(var_true / draws)
            se_var = var_true * math.sqrt(2.0 / (draws - 1))
            worst = max(
                worst,
                float((m - mean_true).abs().max()) / se_mean,
                float((v - var_true).abs().max()) / se_var,
            )
        results.append(
            _result(f"marginal/q_sample_t{t}", worst, 3.0, f"z-score over {draws} draws")
        )
    return results


def _gf2_cycle_dimension(atom_count: int, edges: list[tuple[int, int]]) -> int:
    """Cycle-space dimension via GF(2) rank of the incidence matrix."""
    basis: dict[int, int] = {}
    rank = 0
    for i, j in edges:
        vector = (1 << i) | (1 << j)
        while vector:
            lead = vector.bit_length() - 1
            if lead in basis:
                vector ^= basis[lead]
            else:
                basis[lead] = vector
                rank += 1
                break
    return len(edges) - rank


def _random_graph(rng: np.random.Generator, n: int) -> BondGraph:
    symbols = tuple(str(s) for s in rng.choice(["C", "N", "O"], size=n))
    bonds = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.3:
                bonds.append((i, j, 1))
    return BondGraph(symbols=symbols, charges=(0,) * n, bonds=tuple(bonds))


def _permuted(bg: BondGraph, perm: np.ndarray) -> BondGraph:
    inverse = {int(old): new for new, old in enumerate(perm)}
    bonds = tuple(
        (min(inverse[i], inverse[j]), max(inverse[i], inverse[j]), order)
        for i, j, order in bg.bonds
    )
    return BondGraph(
        symbols=tuple(bg.symbols[int(i)] for i in perm),
        charges=tuple(bg.charges[int(i)] for i in perm),
        bonds=bonds,
    )


def fixture_molecules():
    """The four-molecule enumeration fixture: exactly one success.

    Generated: a C3 ring (novel, unique, on target), its exact duplicate
    (not first occurrence), a C4 ring already in the training set (not
    novel), and a C2 chain (off target). Ring target {1} makes S = 25.0.
    """
    a = 1.45
    triangle = molecule_from_atoms(
        ["C"] * 3, [[0, 0, 0], [a, 0, 0], [a / 2, a * math.sqrt(3) / 2, 0]], label="tri"
    )
    square = molecule_from_atoms(
        ["C"] * 4, [[0, 0, 0], [a, 0, 0], [a, a, 0], [0, a, 0]], label="sq"
    )
    chain = molecule_from_atoms(["C"] * 2, [[0, 0, 0], [a, 0, 0]], label="chain")
    generated = [triangle, replace(triangle, label="tri-dup"), square, chain]
    training = [square]
    return generated, training


def check_chemistry(seed: int = 0) -> list[CheckResult]:
    """Graph-theory oracles for ring counting, hashing, and the S metric."""
    rng = np.random.default_rng(seed)
    results = []

    mismatches = 0
    checked = 0
    for _ in range(300):
        n = int(rng.integers(1, 9))
        bg = _random_graph(rng, n)
        edges = [(i, j) for i, j, _ in bg.bonds]
        if ring_count(bg) != _gf2_cycle_dimension(n, edges):
            mismatches += 1
        checked += 1
    results.append(
        _result("chemistry/ring_count_rank_oracle", float(mismatches), 0.0, f"{checked} graphs")
    )

    base = _random_graph(rng, 10)
    reference = canonical_hash(base)
    hash_mismatches = sum(
        1
        for _ in range(1000)
        if canonical_hash(_permuted(base, rng.permutation(10))) != reference
    )
    results.append(
        _result("chemistry/hash_relabeling", float(hash_mismatches), 0.0, "1000 isomorphs")
    )

    generated, training = fixture_molecules()
    from .chem.bonds import infer_bonds

    training_hashes = {canonical_hash(infer_bonds(m)) for m in training}
    report = compute_metrics(
        generated, mode="ring", ring_targets={1}, training_hashes=training_hashes
    )
    results.append(
        _result(
            "chemistry/success_rate_fixture",
            abs(report.success_rate - 25.0),
            0.0,
            "4-molecule enumeration",
        )
    )

    hexagon = tuple((min(i, (i + 1) % 6), max(i, (i + 1) % 6), 1) for i in range(6))
    ring = BondGraph(symbols=("C",) * 7, charges=(0,) * 7, bonds=hexagon + ((0, 6, 1),))
    bare_ring = BondGraph(symbols=("C",) * 6, charges=(0,) * 6, bonds=hexagon)
    scaffold_ok = canonical_hash(murcko_scaffold(ring)) == canonical_hash(bare_ring)
    chain_graph = BondGraph(symbols=("C", "C"), charges=(0, 0), bonds=((0, 1, 1),))
    chain_ok = canonical_hash(murcko_scaffold(chain_graph)) == EMPTY_SCAFFOLD_DIGEST
    results.append(
        _result(
            "chemistry/scaffold_pruning",
            0.0 if (scaffold_ok and chain_ok) else 1.0,
            0.0,
            "tailed ring and bare chain",
        )
    )
    return results


def check_zero_cog(seed: int = 0, inject_cog_fault: bool = False) -> list[CheckResult]:
    """Column means of every coordinate state along a full trajectory."""
    rng = np.random.default_rng(seed)
    autoencoder, denoiser = _models(seed)
    schedule = make_schedule(100, "polynomial")
    sub_coords, sub_feats = _random_molecule_tensors(rng, 4)
    prior = autoencoder.encode(
        sub_coords, sub_feats, generator=torch.Generator().manual_seed(seed)
    )
    worst = 0.0

    def on_state(t: int, coords: torch.Tensor, feats: torch.Tensor) -> None:
        nonlocal worst
        worst = max(worst, float(coords.mean(dim=0).abs().max()))

    project_fn = (lambda x: x) if inject_cog_fault else project_zero_cog
    mol = sample(
        prior,
        8,
        schedule,
        denoiser,
        FeatureScaler(),
        _ALPHABET,
        noise=draw_sample_noise(8, 6, schedule, torch.Generator().manual_seed(seed), torch.float64),
        on_state=on_state,
        project_fn=project_fn,
    )
    worst = max(worst, float(np.abs(mol.coords.mean(axis=0)).max()))
    detail = "fault injected" if inject_cog_fault else f"T={schedule.steps} trajectory"
    return [_result("zero_cog/trajectory", worst, 1e-8, detail)]


def run_suites(
    names: list[str] | None = None, seed: int = 0, inject_cog_fault: bool = False
) -> list[CheckResult]:
    chosen = list(names) if names else list(SUITES)
    unknown = [n for n in chosen if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; available: {SUITES}")
    results: list[CheckResult] = []
    for name in chosen:
        if name == "equivariance":
            results += check_equivariance(seed)
        elif name == "invariance":
            results += check_invariance(seed)
        elif name == "gradients":
            results += check_gradients(seed)
        elif name == "marginal":
            results += check_marginal(seed)
        elif name == "chemistry":
            results += check_chemistry(seed)
        elif name == "zero_cog":
            results += check_zero_cog(seed, inject_cog_fault=inject_cog_fault)
    return results
