import math

import pytest
import torch

from fedkf import losses
from fedkf.errors import ValidationError
from fedkf.losses import FusionWeights, GenLossWeights

# Expected values below were computed with plain `math` on the same inputs.
PROBS = torch.tensor([[0.9, 0.1], [0.2, 0.8]], dtype=torch.float64)
FEATS = torch.tensor([[1.0, -2.0, 0.5], [-1.0, 0.0, 3.0]], dtype=torch.float64)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_gen_ce_oracle():
    assert float(losses.loss_gen_ce(PROBS)) == pytest.approx(0.164252033486018, abs=1e-12)


def test_gen_ce_single_confident_row():
    assert float(losses.loss_gen_ce(t([[0.9, 0.1]]))) == pytest.approx(0.105360516, abs=1e-9)


def test_gen_ie_oracle():
    assert float(losses.loss_gen_ie(PROBS)) == pytest.approx(-0.6881388137135884, abs=1e-12)


def test_gen_ie_uniform_batch_is_minus_log_c():
    probs = torch.eye(4, dtype=torch.float64)
    assert float(losses.loss_gen_ie(probs)) == pytest.approx(-math.log(4))


def test_gen_ie_collapsed_batch_is_zero():
    probs = t([[1.0, 0.0], [1.0, 0.0]])
    assert float(losses.loss_gen_ie(probs)) == pytest.approx(0.0)


def test_gen_act_oracle():
    assert float(losses.loss_gen_act(FEATS)) == pytest.approx(-3.75)
    assert float(losses.loss_gen_act(t([[1.0, -1.0], [3.0, 3.0]]))) == pytest.approx(-4.0)


def test_gen_total_oracle():
    total = losses.loss_gen_total(PROBS, FEATS, GenLossWeights(lambda1=0.5, lambda2=0.1))
    assert float(total) == pytest.approx(-0.9810127969705794, abs=1e-12)


def test_gen_total_zero_weights_reduce_to_info_entropy():
    total = losses.loss_gen_total(PROBS, FEATS, GenLossWeights(0.0, 0.0))
    assert float(total) == pytest.approx(float(losses.loss_gen_ie(PROBS)))


def test_kl_oracle():
    kl = losses.loss_kd_kl(t([[1.0, 2.0, 3.0]]), t([[3.0, 2.0, 1.0]]))
    assert float(kl) == pytest.approx(1.1504207652088825, abs=1e-12)


def test_kl_identical_logits_is_zero():
    z = torch.randn(5, 4, dtype=torch.float64)
    assert float(losses.loss_kd_kl(z, z.clone())) == pytest.approx(0.0, abs=1e-12)


def test_kl_two_point_log2():
    # one-hot-ish teacher vs uniform student -> log 2
    kl = losses.loss_kd_kl(t([[50.0, -50.0]]), t([[0.0, 0.0]]))
    assert float(kl) == pytest.approx(math.log(2), abs=1e-9)


def test_kl_no_gradient_reaches_teacher():
    teacher = torch.randn(3, 4, requires_grad=True)
    student = torch.randn(3, 4, requires_grad=True)
    losses.loss_kd_kl(teacher, student).backward()
    assert teacher.grad is None and student.grad is not None


def test_student_ce_oracle():
    ce = losses.loss_student_ce(t([[1.0, 2.0, 3.0]]), [2])
    assert float(ce) == pytest.approx(0.40760596444438046, abs=1e-12)


def test_student_ce_rejects_out_of_range_labels():
    with pytest.raises(ValidationError):
        losses.loss_student_ce(t([[1.0, 2.0]]), [2])


def test_student_total_arithmetic():
    assert losses.loss_student_total(0.5, 0.25, FusionWeights(1.0)) == pytest.approx(0.75)
    assert losses.loss_student_total(0.5, 0.25, FusionWeights(0.0)) == pytest.approx(0.5)


def test_gamma_setting_for_low_skew_cifar10():
    from fedkf.config import load_config

    assert load_config("preset:cifar10_alpha1").algorithm.params["gamma"] == 0.001
    assert load_config("preset:cifar10_alpha0p1").algorithm.params["gamma"] == 1.0


@pytest.mark.parametrize("kwargs", [dict(lambda1=-1), dict(lambda2=float("nan"))])
def test_gen_weights_validation(kwargs):
    with pytest.raises(ValidationError):
        GenLossWeights(**kwargs)


def test_fusion_weights_validation():
    with pytest.raises(ValidationError):
        FusionWeights(-0.1)


def test_pseudo_labels_break_ties_low():
    assert losses.pseudo_labels(t([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_gen_losses_finite_on_zero_probabilities():
    probs = t([[1.0, 0.0, 0.0]]).requires_grad_(True)
    total = losses.loss_gen_total(probs, t([[0.0]]), GenLossWeights())
    total.backward()
    assert torch.isfinite(total) and torch.isfinite(probs.grad).all()
