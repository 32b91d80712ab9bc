"""Symbolic derivation of the manufactured sources.

Applies the strong operators to the exact fields and prints the sources at a
few check points. The Rust implementation hard-codes the expanded closed
forms; its unit test compares against the values printed here.

    python3 docs/manufactured_sources.py
"""
import sympy as sp

x, y, t = sp.symbols("x y t", real=True)

amp_p, amp_c, amp_t = sp.Rational(1, 4), sp.Rational(1, 2), 1
F, alpha1, alpha2 = sp.Rational(1, 2), sp.Rational(3, 10), 2
phi0, phi_slope = sp.Rational(1, 5), sp.Rational(1, 10)
rho, D, lam = 2, sp.Rational(1, 5), sp.Rational(1, 5)
kappa = sp.Rational(1, 100)

X = sp.sin(sp.pi * x) * sp.sin(sp.pi * y)
E = sp.exp(-2 * t)
p = -amp_p * X * E
c = amp_c * X * E
th = amp_t * X * E
r = F * t

S = 1 / (1 + sp.exp(-p))
kR = sp.Rational(1, 5) + S
a = kappa * kR  # k / mu = kappa
phi = phi0 + phi_slope * r


def div(vx, vy):
    return sp.diff(vx, x) + sp.diff(vy, y)


def grad(u):
    return sp.diff(u, x), sp.diff(u, y)


gp = grad(p)
flux = (a * gp[0], a * gp[1])

g_p = sp.diff(phi * S, t) - div(*flux) - alpha1 * F
gc = grad(c)
g_c = (
    sp.diff(phi * S * c, t)
    - div(phi * S * D * gc[0], phi * S * D * gc[1])
    - div(c * flux[0], c * flux[1])
)
gt = grad(th)
g_t = (
    sp.diff((phi * S + rho) * th, t)
    - div(lam * gt[0], lam * gt[1])
    - div(th * flux[0], th * flux[1])
    - alpha2 * F
)

points = [((0.3, 0.6), 0.25), ((0.8, 0.15), 0.7), ((0.5, 0.5), 0.0)]
for (px, py), pt in points:
    sub = {x: sp.Rational(str(px)), y: sp.Rational(str(py)), t: sp.Rational(str(pt))}
    vals = [sp.N(g.subs(sub), 20) for g in (g_p, g_c, g_t)]
    print(f"x=({px}, {py}) t={pt}: " + "  ".join(str(v) for v in vals))
