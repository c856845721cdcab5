"""Reference values for the cosine log-SNR schedule, computed with mpmath at 50 digits."""
from mpmath import mp, atan, exp, tan, log, sqrt, mpf

mp.dps = 50


def schedule(T, lmax, lmin):
    b = atan(exp(-mpf(lmax) / 2))
    a = atan(exp(-mpf(lmin) / 2)) - b
    lam = [-2 * log(tan(a * mpf(t) / T + b)) for t in range(T + 1)]
    sig = lambda v: 1 / (1 + exp(-v))
    abar = [sqrt(sig(l)) for l in lam]
    sbar = [sqrt(sig(-l)) for l in lam]
    return lam, abar, sbar


if __name__ == "__main__":
    lam, abar, sbar = schedule(6, "9.8", "-5.1")
    for t in range(7):
        print(f"t={t} lambda={mp.nstr(lam[t], 20)} abar={mp.nstr(abar[t], 20)} sbar={mp.nstr(sbar[t], 20)}")
