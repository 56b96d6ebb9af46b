#pragma once

#include <cstdint>

namespace gnae {

struct TrainConfig {
    int batch_size = 50;
    double learning_rate = 0.005;
    int epochs = 25;
    int samples_per_graphon = 5; // graphs drawn per batch element
    int sample_size = 10;        // nodes per drawn graph
    double gamma = 0.1;          // latent regularizer weight
    int cheb_order = 4;
    int feature_dim = 30;
    int latent_dim = 15;
    int fgw_order = 2;
    int sfgw_projections = 50;
    double signal_sigma = 1.0;
    std::uint64_t seed = 42;
};

struct EpochStats {
    double loss = 0.0;
    double recon = 0.0;
    double reg = 0.0;
};

} // namespace gnae
