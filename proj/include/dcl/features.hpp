#pragma once

// Discriminator features: the tapped layer of D evaluated over a dataset.

#include <cstdint>

#include "dcl/data.hpp"
#include "dcl/nn.hpp"

namespace dcl::features {

/// Worker count from DCL_THREADS; 1 when unset or invalid.
unsigned thread_count();

/// Batchnorm uses running statistics. Dropout layers run at `dropout_rate`
/// (0 disables them) with masks keyed by sample index, so the result does not
/// depend on batch size or thread count.
data::FeatureMatrix extract_features(nn::Network<float>& discriminator, const data::ImageDataset& ds,
                                     double dropout_rate, std::uint64_t seed, std::size_t batch_size = 250,
                                     unsigned threads = 0);

} // namespace dcl::features
