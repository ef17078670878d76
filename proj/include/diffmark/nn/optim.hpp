#pragma once

#include <string>
#include <vector>

#include "diffmark/nn/layers.hpp"

namespace diffmark::nn {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay Adam over a fixed parameter list. Parameters
// without a gradient in a step are skipped (their moments do not advance).
class AdamW {
public:
    AdamW() = default;
    AdamW(State<float>& state, AdamWConfig cfg);

    void step(double lr);
    long steps() const { return step_; }

    // Moment buffers exposed for checkpointing.
    void save_state(State<float>& out);
    void set_step(long s) { step_ = s; }

private:
    std::vector<Var<float>*> params_;
    std::vector<std::string> names_;
    std::vector<Tensor<float>> m_, v_;
    AdamWConfig cfg_;
    long step_ = 0;
};

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(State<float>& state, double max_norm);

// Linear warmup to `peak`, then linear decay to `floor` at `total`.
double warmup_linear_lr(long step, long warmup, long total, double peak, double floor);

}  // namespace diffmark::nn
