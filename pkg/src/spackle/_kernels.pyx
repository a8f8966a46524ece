# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused elementwise kernels for the encoder.

Every function mirrors one in ``_kernels_py`` and writes into caller-provided
output buffers. Inputs must be C-contiguous.
"""

from libc.math cimport sqrt, exp

ctypedef fused real:
    float
    double

def layernorm_forward(const real[:, ::1] x, const real[::1] gamma,
                      const real[::1] beta, double eps,
                      real[:, ::1] out, real[:, ::1] xhat, real[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, r, v
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mean
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                v = (x[i, j] - mean) * r
                xhat[i, j] = <real>v
                out[i, j] = <real>(v * gamma[j] + beta[j])


def layernorm_backward(const real[:, ::1] dy, const real[:, ::1] xhat,
                       const real[::1] rstd, const real[::1] gamma,
                       real[:, ::1] dx, real[::1] dgamma, real[::1] dbeta):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    cdef double s1, s2, g, r
    with nogil:
        for j in range(d):
            dgamma[j] = 0
            dbeta[j] = 0
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            s1 /= d
            s2 /= d
            r = rstd[i]
            for j in range(d):
                g = dy[i, j] * gamma[j]
                dx[i, j] = <real>(r * (g - s1 - xhat[i, j] * s2))


cdef extern from *:
    """
    #include <math.h>
    #define SPK_GELU_C 0.7978845608028654
    #define SPK_GELU_A 0.044715
    #define SPK_DEFINE_GELU(T, SUF, EXP, FMIN, FMAX)                                  \
    static void spk_gelu_fwd_##SUF(const T *restrict x, T *restrict out, long n) {    \
        _Pragma("omp simd")                                                           \
        for (long i = 0; i < n; i++) {                                                \
            T v = x[i];                                                               \
            T y = (T)SPK_GELU_C * (v + (T)SPK_GELU_A * v * v * v);                    \
            y = FMIN(FMAX(y, (T)-30), (T)30);                                         \
            out[i] = v / ((T)1 + EXP((T)-2 * y));                                     \
        }                                                                             \
    }                                                                                 \
    static void spk_gelu_bwd_##SUF(const T *restrict x, const T *restrict dy,         \
                                   T *restrict dx, long n) {                          \
        _Pragma("omp simd")                                                           \
        for (long i = 0; i < n; i++) {                                                \
            T v = x[i];                                                               \
            T y = (T)SPK_GELU_C * (v + (T)SPK_GELU_A * v * v * v);                    \
            y = FMIN(FMAX(y, (T)-30), (T)30);                                         \
            T s = (T)1 / ((T)1 + EXP((T)-2 * y));                                     \
            T du = (T)SPK_GELU_C * ((T)1 + (T)(3 * SPK_GELU_A) * v * v);              \
            dx[i] = dy[i] * (s + (T)2 * v * s * ((T)1 - s) * du);                     \
        }                                                                             \
    }
    SPK_DEFINE_GELU(float, f, expf, fminf, fmaxf)
    SPK_DEFINE_GELU(double, d, exp, fmin, fmax)
    """
    void spk_gelu_fwd_f(const float *x, float *out, long n) nogil
    void spk_gelu_fwd_d(const double *x, double *out, long n) nogil
    void spk_gelu_bwd_f(const float *x, const float *dy, float *dx, long n) nogil
    void spk_gelu_bwd_d(const double *x, const double *dy, double *dx, long n) nogil


def gelu_forward(const real[::1] x, real[::1] out):
    """tanh-approximate GELU, evaluated as x * sigmoid(2 * c * (x + a x^3))."""
    cdef long n = x.shape[0]
    if n == 0:
        return
    with nogil:
        if real is float:
            spk_gelu_fwd_f(&x[0], &out[0], n)
        else:
            spk_gelu_fwd_d(&x[0], &out[0], n)


def gelu_backward(const real[::1] x, const real[::1] dy, real[::1] dx):
    cdef long n = x.shape[0]
    if n == 0:
        return
    with nogil:
        if real is float:
            spk_gelu_bwd_f(&x[0], &dy[0], &dx[0], n)
        else:
            spk_gelu_bwd_d(&x[0], &dy[0], &dx[0], n)


def masked_softmax_forward(const real[:, :, ::1] scores,
                           const unsigned char[:, ::1] presence,
                           Py_ssize_t heads, real[:, :, ::1] out):
    """Row softmax over keys; absent keys get weight exactly 0."""
    cdef Py_ssize_t m = scores.shape[0], t = scores.shape[1], i, q, k, b
    cdef double mx, s, e
    with nogil:
        for i in range(m):
            b = i // heads
            for q in range(t):
                mx = -1e300
                for k in range(t):
                    if presence[b, k] and scores[i, q, k] > mx:
                        mx = scores[i, q, k]
                s = 0.0
                for k in range(t):
                    if presence[b, k]:
                        e = exp(scores[i, q, k] - mx)
                        out[i, q, k] = <real>e
                        s += e
                    else:
                        out[i, q, k] = 0
                for k in range(t):
                    out[i, q, k] = <real>(out[i, q, k] / s)


def softmax_backward(const real[:, :, ::1] p, const real[:, :, ::1] dp,
                     real[:, :, ::1] ds):
    cdef Py_ssize_t m = p.shape[0], t = p.shape[1], i, q, k
    cdef double s
    with nogil:
        for i in range(m):
            for q in range(t):
                s = 0.0
                for k in range(t):
                    s += dp[i, q, k] * p[i, q, k]
                for k in range(t):
                    ds[i, q, k] = <real>(p[i, q, k] * (dp[i, q, k] - s))
