"""EMA teachers and the L2 consistency losses that tie students to them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KdConfig:
    tau: float = 0.994
    lambda_kd_g: float = 1.0
    lambda_kd_d: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"kd.tau must lie in [0, 1], got {self.tau}")
        if self.lambda_kd_g < 0 or self.lambda_kd_d < 0:
            raise ValueError("kd lambdas must be >= 0")

    @property
    def enabled(self):
        return self.lambda_kd_g > 0 or self.lambda_kd_d > 0


def make_teacher(student):
    """Teachers start as an exact copy of their student."""
    return student.copy()


def ema_update(teacher, student, tau):
    """w_t <- tau * w_t + (1 - tau) * w_s for every weight and BN buffer.

    Mutates and returns ``teacher``. The arithmetic runs in float64 and is
    rounded once to storage precision.
    """
    t_arrays = teacher.arrays()
    s_arrays = student.arrays()
    if len(t_arrays) != len(s_arrays):
        raise ValueError("teacher/student layer layout differs")
    for (i, name, ta), (_, sname, sa) in zip(t_arrays, s_arrays):
        if name != sname or ta.shape != sa.shape:
            raise ValueError(f"layer {i} {name}: teacher {ta.shape} vs student {sname} {sa.shape}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            new = sa.copy()
        else:
            new = (tau * ta.astype(np.float64) + (1.0 - tau) * sa.astype(np.float64)).astype(ta.dtype)
        st = teacher.states[i]
        if name.startswith("buf:"):
            st.buffers[name[4:]] = new
        else:
            st.params[name] = new
    return teacher


def l2_consistency(teacher_out, student_out):
    """Mean squared difference and its gradient w.r.t. the student output."""
    diff = student_out.astype(np.float64) - teacher_out.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(student_out.dtype)


def kd_gen_loss(teacher_g, student_g, z, y_onehot):
    """Per-pixel mean of ||G_t(z,y) - G_s(z,y)||^2 over the batch.

    Both generators see batch statistics (teacher buffers untouched), so two
    identical networks give exactly zero. Returns ``(loss, student_grads)``;
    the teacher never receives a gradient.
    """
    inp = np.concatenate([z, y_onehot], axis=1).astype(np.float32)
    t_out, _ = teacher_g.forward(inp, mode="frozen")
    s_out, caches = student_g.forward(inp, mode="frozen")
    loss, g = l2_consistency(t_out, s_out)
    _, grads = student_g.backward(caches, g)
    return loss, grads


def kd_disc_loss(teacher_d, student_d, images, y_onehot):
    """Mean squared logit difference between teacher and student discriminators."""
    from .cdcgan import disc_input

    inp = disc_input(images, y_onehot)
    t_out, _ = teacher_d.forward(inp, mode="frozen")
    s_out, caches = student_d.forward(inp, mode="frozen")
    loss, g = l2_consistency(t_out, s_out)
    _, grads = student_d.backward(caches, g)
    return loss, grads


def total_gen_loss(adv, kd, lambda_kd_g):
    if not (np.isfinite(adv) and np.isfinite(kd)):
        raise FloatingPointError("generator loss components must be finite")
    return adv + lambda_kd_g * kd
