"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``[PASS]``/``[FAIL]`` line to ``conftest.ACCEPTANCE_LINES``;
the lines are printed in the pytest terminal summary.  Run on its own with
``pytest tests/test_acceptance.py -v``.
"""

import functools
import math

import numpy as np
import pytest

import conftest
from energykd import augment, cli, data, energy, kdloss, models, numcore, report
from energykd.augment import Method
from energykd.energy import Bucket
from energykd.kdloss import PolicyMode, TemperaturePolicy
from gradcheck import numeric_grad, rel_error

SEEDS = range(5)

# benchmark task: 6-class blobs, N=3000, d=16, moderate noise
TASK = dict(n_classes=6, n_per_class=500, dim=16, class_separation=4.0, noise_sigma=1.5,
            n_test_per_class=500)
TEACHER_HIDDEN, STUDENT_HIDDEN = (64,), (16,)
TEACHER_EPOCHS, STUDENT_EPOCHS = 30, 50


def record(label, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, detail


def train_cfg(seed, epochs, policy=None):
    return models.TrainConfig(epochs=epochs, seed=seed,
                              policy=policy or TemperaturePolicy())


@functools.lru_cache(maxsize=None)
def benchmark(seed):
    """Teacher, energy partition and manifests for one seed of the benchmark task."""
    train, test = data.make_blobs(seed=seed, **TASK)
    teacher, logits, _ = models.pretrain_teacher(train, train_cfg(seed, TEACHER_EPOCHS),
                                                 TEACHER_HIDDEN, test)
    recs = energy.rank_dataset(logits)
    plan = energy.partition(recs, 0.2)
    manifests = {
        "energy": energy.build_manifest(plan, recs, TemperaturePolicy(), 6, 1.0,
                                        teacher.checksum()),
        "constant": energy.build_manifest(plan, recs, TemperaturePolicy.constant(4.0), 6, 1.0,
                                          teacher.checksum()),
    }
    return train, test, teacher, logits, plan, manifests


@functools.lru_cache(maxsize=None)
def distilled(seed, policy="energy", aug_source=None):
    train, test, teacher, _, plan, manifests = benchmark(seed)
    m = manifests[policy]
    heda = None
    if aug_source is not None:
        heda = augment.build_heda_dataset(train, plan, Method.CUTMIX, seed=seed, fraction=0.3,
                                          source=aug_source)
    student, history = models.distill_student(train, teacher, m,
                                              train_cfg(seed, STUDENT_EPOCHS, m.policy),
                                              STUDENT_HIDDEN, test, heda)
    return student, history


def test_ac01_energy_formula():
    rng = np.random.default_rng(1)
    base = abs(energy.energy_score([0, 0, 0, 0], 1.0) + math.log(4))
    worst = 0.0
    for _ in range(1000):
        z = rng.normal(size=rng.integers(2, 20)) * rng.uniform(0.1, 10)
        c = rng.uniform(-100, 100)
        t_e = rng.uniform(0.1, 5)
        worst = max(worst, abs(energy.energy_score(z + c, t_e) - (energy.energy_score(z, t_e) - c)))
    record("AC1 energy formula", base <= 1e-9 and worst <= 1e-9,
           f"|E(0^4)+ln4|={base:.1e}, max shift error {worst:.1e} over 1000 cases (tol 1e-9)")


def test_ac02_ten_sample_partition():
    energies = [0.3, -1.0, 2.5, 0.9, -0.2, 1.7, 3.1, -2.4, 0.0, 1.1]
    recs = energy.records_from_energies(np.array(energies))
    plan = energy.partition(recs, 0.4)
    ascending = sorted(energies)
    ok = plan.sizes() == (4, 2, 4) and plan.e_low == ascending[3] and plan.e_high == ascending[6]
    record("AC2 ten-sample partition", ok,
           f"sizes {plan.sizes()}, e_low=rank4 {plan.e_low}, e_high=rank7 {plan.e_high}")


def test_ac03_gradient_suite():
    rng = np.random.default_rng(3)
    worst = {"kl_grad": 0.0, "ce_grad": 0.0, "energy_kd_grad": 0.0, "mlp_param_grad": 0.0}
    for _ in range(100):
        k = int(rng.integers(2, 8))
        zt, zs = rng.normal(size=(2, k)) * 2
        T = rng.uniform(0.5, 8)
        g = numcore.kl_grad_wrt_student_logits(zt, zs, T)
        n = numeric_grad(lambda v: numcore.kl_tempered(zt, v, T), zs)
        worst["kl_grad"] = max(worst["kl_grad"], rel_error(g, n))

        y = int(rng.integers(k))
        g = numcore.cross_entropy_grad(zs, y)
        n = numeric_grad(lambda v: numcore.cross_entropy(v, y), zs)
        worst["ce_grad"] = max(worst["ce_grad"], rel_error(g, n))

        b = int(rng.integers(1, 6))
        zt_b, zs_b = rng.normal(size=(2, b, k)) * 2
        temps = rng.uniform(0.5, 8, size=b)
        g = kdloss.energy_kd_loss(zt_b, zs_b, temps).grad
        n = numeric_grad(lambda v: kdloss.energy_kd_loss(zt_b, v, temps).mean, zs_b)
        worst["energy_kd_grad"] = max(worst["energy_kd_grad"], rel_error(g, n))

        model = models.MlpModel.init([3, 6, k], seed=int(rng.integers(1 << 30)))
        model.biases[0][:] = rng.uniform(0.5, 1.0, size=6)  # stay clear of ReLU kinks
        x = rng.uniform(-0.2, 0.2, size=(4, 3))
        yb = rng.integers(k, size=4)
        grads = models.backward(model, x, numcore.cross_entropy_grad(models.forward(model, x), yb))
        for i, p in enumerate(model.params()):
            def loss(v, p=p):
                saved = p.copy()
                p[...] = v
                out = float(np.sum(numcore.cross_entropy(models.forward(model, x), yb)))
                p[...] = saved
                return out
            worst["mlp_param_grad"] = max(worst["mlp_param_grad"],
                                          rel_error(grads[i], numeric_grad(loss, p.copy())))
    ok = (max(worst["kl_grad"], worst["ce_grad"], worst["energy_kd_grad"]) <= 1e-5
          and worst["mlp_param_grad"] <= 1e-4)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("AC3 gradient suite", ok, f"max rel error over 100 cases: {detail}")


def test_ac04_reduction_equivalence():
    rng = np.random.default_rng(4)
    worst_two, worst_grad = 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(10, 300))
        recs = energy.records_from_energies(rng.normal(size=n))
        plan = energy.partition(recs, float(rng.choice([0.1, 0.2, 0.3, 0.5])))
        t = float(rng.uniform(1, 8))
        zt, zs = rng.normal(size=(2, n, 5)) * 3
        const = kdloss.energy_kd_loss(
            zt, zs, energy.build_manifest(plan, recs, TemperaturePolicy.constant(t), 5)
            .temperatures()).losses
        two = kdloss.energy_kd_loss(zt, zs, energy.build_manifest(
            plan, recs, TemperaturePolicy(base_t=t, t_plus=0, t_minus=0), 5).temperatures()).losses
        grad = kdloss.energy_kd_loss(zt, zs, energy.build_manifest(
            plan, recs, TemperaturePolicy(PolicyMode.GRADATION, t_min=t, t_max=t), 5)
            .temperatures()).losses
        worst_two = max(worst_two, np.max(np.abs(two - const)))
        worst_grad = max(worst_grad, np.max(np.abs(grad - const)))
    record("AC4 reduction equivalence", worst_two <= 1e-12 and worst_grad <= 1e-12,
           f"two-sided zero offsets {worst_two:.1e}, flat gradation {worst_grad:.1e} (tol 1e-12)")


@pytest.mark.slow
def test_ac05_confidence_energy():
    rows = []
    for seed in SEEDS:
        _, _, _, logits, plan, _ = benchmark(seed)
        stats = report.bucket_confidence(logits, plan)
        rows.append((stats[Bucket.LOW].mean_confidence, stats[Bucket.HIGH].mean_confidence))
    ok = all(lo > hi for lo, hi in rows)
    detail = "; ".join(f"s{s} low {lo:.3f} > high {hi:.3f}" for s, (lo, hi) in zip(SEEDS, rows))
    record("AC5 confidence-energy", ok, detail)


@pytest.mark.slow
def test_ac06_distillation():
    ratios, e_accs, c_accs = [], [], []
    for seed in SEEDS:
        _, test, teacher, _, _, _ = benchmark(seed)
        t_acc = models.accuracy(teacher, test)
        e_acc = models.accuracy(distilled(seed, "energy")[0], test)
        c_acc = models.accuracy(distilled(seed, "constant")[0], test)
        ratios.append(e_acc / t_acc)
        e_accs.append(e_acc)
        c_accs.append(c_acc)
    gap = 100 * (np.mean(e_accs) - np.mean(c_accs))
    ok_a = min(ratios) >= 0.95
    ok_b = gap >= -0.5
    record("AC6 distillation", ok_a and ok_b,
           f"min student/teacher {min(ratios):.3f} (need >= 0.95); energy {np.mean(e_accs):.4f} "
           f"vs constant {np.mean(c_accs):.4f}, gap {gap:+.2f} pp (need >= -0.5)")


@pytest.mark.slow
def test_ac07_heda_cost():
    n = 10_000
    train = data.make_blobs(4, n // 4, 16, seed=0)
    cfg = train_cfg(0, 1)
    teacher = models.MlpModel.init([16, 32, 4], seed=[0, 0])
    recs = energy.rank_dataset(models.forward(teacher, train.features))
    m = energy.build_manifest(energy.partition(recs, 0.2), recs, TemperaturePolicy(), 4)
    r_values = (0.2, 0.3, 0.4, 0.5, 1.0)
    sizes, epochs = {}, []
    for r in r_values:
        plan = energy.partition(recs, min(r, 0.5))
        heda = augment.build_heda_dataset(train, plan, Method.MIXUP, seed=0, fraction=r)
        sizes[r] = len(heda.dataset)
        epochs.append(functools.partial(models.distill_student, train, teacher, m, cfg, (16,),
                                        None, heda))
    times = dict(zip(r_values, report.time_interleaved(epochs, rounds=30)))
    size_ok = all(sizes[r] == n + math.floor(n * r) for r in (0.2, 0.3, 0.4, 0.5))
    order = [times[r] for r in (0.2, 0.3, 0.4, 0.5)]
    time_ok = all(a <= b for a, b in zip(order, order[1:])) and times[0.5] < times[1.0]
    detail = ", ".join(f"r={r}: {sizes[r]} samples {1000 * times[r]:.1f} ms/epoch" for r in times)
    record("AC7 HE-DA size/cost", size_ok and time_ok, detail)


def test_ac08_augmentation_invariants():
    rng = np.random.default_rng(8)
    a, b = np.zeros((4, 4, 1)), np.ones((4, 4, 1))
    lam_ok = True
    for _ in range(1000):
        s = augment.cutmix(a, b, 0, 1, float(rng.beta(1, 1)), rng, 2)
        area = 0 if s.box is None else (s.box[2] - s.box[0]) * (s.box[3] - s.box[1])
        lam_ok &= s.lam == 1 - area / 16
    ds = data.Dataset(rng.uniform(0, 1, size=(500, 16)), rng.integers(3, size=500), 3)
    plan = energy.partition(energy.records_from_energies(rng.normal(size=500)), 0.3)
    high = set(plan.ids_in(Bucket.HIGH))
    convex_ok, prov_ok = True, True
    for method in Method:
        heda = augment.build_heda_dataset(ds, plan, method, seed=8)
        extra = heda.dataset.features[500:]
        convex_ok &= bool(extra.min() >= 0 and extra.max() <= 1)
        prov_ok &= all(p.src_a in high and p.src_b in high for p in heda.provenance)
        if method is Method.MIXUP:
            for f, p in zip(extra, heda.provenance):
                mix = p.lam * ds.features[p.src_a] + (1 - p.lam) * ds.features[p.src_b]
                convex_ok &= bool(np.allclose(f, mix, atol=1e-6))
    record("AC8 augmentation invariants", lam_ok and convex_ok and prov_ok,
           f"cutmix lambda exact on 1000 draws: {lam_ok}; mixup convex: {convex_ok}; "
           f"provenance in HIGH: {prov_ok}")


@pytest.mark.slow
def test_ac09_high_vs_low_augmentation():
    high, low = [], []
    for seed in SEEDS:
        _, test, *_ = benchmark(seed)
        high.append(models.accuracy(distilled(seed, "energy", "high")[0], test))
        low.append(models.accuracy(distilled(seed, "energy", "low")[0], test))
    margin = 100 * (np.mean(high) - np.mean(low))
    record("AC9 high- vs low-energy augmentation", np.mean(high) >= np.mean(low),
           f"high {np.mean(high):.4f} vs low {np.mean(low):.4f} ({margin:+.2f} pp), "
           f"per seed {[round(h - l, 4) for h, l in zip(high, low)]}")


@pytest.mark.slow
def test_ac10_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("EKD_RUN_ROOT", str(tmp_path))
    args = ["pipeline", "--name", "det", "--classes", "4", "--per-class", "150", "--dim", "16",
            "--test-per-class", "50", "--teacher-epochs", "5", "--epochs", "5",
            "--augment", "cutmix", "--r", "0.3"]
    assert cli.main(args) == 0
    run = tmp_path / "det"
    first = {p.name: p.read_bytes() for p in run.iterdir()}
    assert cli.main(["pipeline", "--config", str(run / "config.txt")]) == 0
    second = {p.name: p.read_bytes() for p in run.iterdir()}
    identical = first == second

    ds = data.load_dataset(run / "train.ekds")
    ekds_ok = data.dataset_bytes(ds) == (run / "train.ekds").read_bytes()
    model = models.load_model(run / "student.ekdm")
    ekdm_ok = models.model_bytes(model) == (run / "student.ekdm").read_bytes()
    manifest = energy.read_manifest(run / "energy_manifest.csv")
    manifest_ok = energy.manifest_text(manifest) == (run / "energy_manifest.csv").read_text()
    record("AC10 determinism and round-trips", identical and ekds_ok and ekdm_ok and manifest_ok,
           f"{len(first)} files bit-identical on rerun: {identical}; EKDS {ekds_ok}, "
           f"EKDM {ekdm_ok}, manifest {manifest_ok}")


@pytest.mark.slow
def test_ac11_correlation_disparity():
    rng = np.random.default_rng(11)
    z = rng.normal(size=(300, 6))
    self_zero = np.all(report.correlation_disparity(z, z)[0] == 0)
    w = rng.normal(size=(300, 6))
    scale, shift = rng.uniform(0.1, 10), rng.uniform(-50, 50)
    affine = max(
        np.max(np.abs(report.correlation_disparity(scale * z + shift, w)[0]
                      - report.correlation_disparity(z, w)[0])),
        np.max(np.abs(report.correlation_disparity(z, scale * w + shift)[0]
                      - report.correlation_disparity(z, w)[0])))
    pairs = []
    for seed in SEEDS:
        _, test, teacher, *_ = benchmark(seed)
        z_t = models.forward(teacher, test.features)
        student = distilled(seed, "energy")[0]
        random_init = models.MlpModel.init([16, *STUDENT_HIDDEN, 6], seed=[seed, 0])
        pairs.append((report.correlation_disparity(models.forward(student, test.features), z_t)[1],
                      report.correlation_disparity(models.forward(random_init, test.features),
                                                   z_t)[1]))
    ok = self_zero and affine <= 1e-9 and all(d < r for d, r in pairs)
    detail = "; ".join(f"s{s} {d:.3f} < {r:.3f}" for s, (d, r) in zip(SEEDS, pairs))
    record("AC11 correlation disparity", ok,
           f"self zero {self_zero}, affine drift {affine:.1e}; distilled vs random: {detail}")
