/* Vectorized elementwise gate nonlinearities for the LSTM kernels.
 *
 * Compiled as a separate translation unit with -ffast-math so the compiler
 * can call the SIMD math library for expf/tanhf; the rest of the extension
 * keeps strict IEEE semantics.  All functions work in place on contiguous
 * rows.  The logistic is the branchless 1/(1+exp(-x)), which saturates
 * cleanly at both ends and propagates NaN.
 */
#ifndef GATEMATH_H
#define GATEMATH_H

void gate_sigmoid_f(float *p, long n);
void gate_tanh_f(float *p, long n);
/* g: activated gates [4H] in (input, forget, cell, output) layout;
 * updates c and h in place and mirrors h into out. */
void gate_cell_update_f(const float *g, float *c, float *h, float *out,
                        long hidden);

void gate_sigmoid_d(double *p, long n);
void gate_tanh_d(double *p, long n);
void gate_cell_update_d(const double *g, double *c, double *h, double *out,
                        long hidden);

#endif
