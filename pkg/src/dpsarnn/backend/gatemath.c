/* See gatemath.h.  Keep this file free of anything but simple elementwise
 * loops: it is compiled with -ffast-math, which is only safe here because
 * every expression is a short product/sum with no reassociable reductions.
 */
#include <math.h>

#include "gatemath.h"

/* Arguments are clamped so expf cannot overflow to inf: the fast-math
 * reciprocal would turn that inf into NaN.  The clamp does not change any
 * representable output (the logistic saturates well inside the range) and
 * leaves NaN inputs NaN. */
void gate_sigmoid_f(float *p, long n)
{
    long j;
    for (j = 0; j < n; j++) {
        float x = p[j];
        x = x > 87.0f ? 87.0f : x;
        x = x < -87.0f ? -87.0f : x;
        p[j] = 1.0f / (1.0f + expf(-x));
    }
}

void gate_tanh_f(float *p, long n)
{
    long j;
    for (j = 0; j < n; j++)
        p[j] = tanhf(p[j]);
}

void gate_cell_update_f(const float *g, float *c, float *h, float *out,
                        long hidden)
{
    long j;
    for (j = 0; j < hidden; j++) {
        float cv = g[hidden + j] * c[j] + g[j] * g[2 * hidden + j];
        float hv = g[3 * hidden + j] * tanhf(cv);
        c[j] = cv;
        h[j] = hv;
        out[j] = hv;
    }
}

void gate_sigmoid_d(double *p, long n)
{
    long j;
    for (j = 0; j < n; j++) {
        double x = p[j];
        x = x > 708.0 ? 708.0 : x;
        x = x < -708.0 ? -708.0 : x;
        p[j] = 1.0 / (1.0 + exp(-x));
    }
}

void gate_tanh_d(double *p, long n)
{
    long j;
    for (j = 0; j < n; j++)
        p[j] = tanh(p[j]);
}

void gate_cell_update_d(const double *g, double *c, double *h, double *out,
                        long hidden)
{
    long j;
    for (j = 0; j < hidden; j++) {
        double cv = g[hidden + j] * c[j] + g[j] * g[2 * hidden + j];
        double hv = g[3 * hidden + j] * tanh(cv);
        c[j] = cv;
        h[j] = hv;
        out[j] = hv;
    }
}
