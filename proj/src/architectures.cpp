#include <string>

#include "kfacsched/error.hpp"
#include "kfacsched/profile.hpp"

// Layer tables for the bundled models. Every convolution and the final
// fully-connected layer is one preconditioned layer; batch-norm layers are
// not preconditioned. Spatial sizes follow the reference implementations
// (224x224 input for ResNet/DenseNet, 299x299 for Inception-v4) and only
// weight the synthetic timings.

namespace kfacsched {

namespace {

class Builder {
 public:
  Builder(std::string model, std::size_t batch) {
    dims_.model = std::move(model);
    dims_.batch_size = batch;
  }

  void conv(std::string name, std::size_t in, std::size_t out, std::size_t kh,
            std::size_t kw, std::uint64_t hw) {
    const std::size_t a = in * kh * kw;
    dims_.layers.push_back({std::move(name), a, out,
                            static_cast<std::uint64_t>(a) * out, hw * hw});
  }

  void fc(std::string name, std::size_t in, std::size_t out) {
    // grad_elements counts the bias; the A factor does not augment it.
    dims_.layers.push_back(
        {std::move(name), in, out, static_cast<std::uint64_t>(in) * out + out, 1});
  }

  ArchitectureDims take() { return std::move(dims_); }

 private:
  ArchitectureDims dims_;
};

ArchitectureDims resnet(const std::string& model, std::size_t batch,
                        const std::size_t (&blocks)[4]) {
  Builder b(model, batch);
  b.conv("conv1", 3, 64, 7, 7, 112);
  const std::size_t widths[4] = {64, 128, 256, 512};
  const std::uint64_t sizes[4] = {56, 28, 14, 7};
  std::size_t in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    const std::size_t w = widths[stage];
    const std::size_t out = 4 * w;
    for (std::size_t blk = 0; blk < blocks[stage]; ++blk) {
      const std::string prefix =
          "layer" + std::to_string(stage + 1) + "." + std::to_string(blk) + ".";
      const std::uint64_t in_hw =
          (blk == 0 && stage > 0) ? sizes[stage - 1] : sizes[stage];
      b.conv(prefix + "conv1", in, w, 1, 1, in_hw);
      b.conv(prefix + "conv2", w, w, 3, 3, sizes[stage]);
      b.conv(prefix + "conv3", w, out, 1, 1, sizes[stage]);
      if (blk == 0) b.conv(prefix + "downsample", in, out, 1, 1, sizes[stage]);
      in = out;
    }
  }
  b.fc("fc", 2048, 1000);
  return b.take();
}

ArchitectureDims densenet201() {
  Builder b("densenet201", 16);
  b.conv("features.conv0", 3, 64, 7, 7, 112);
  const std::size_t block_layers[4] = {6, 12, 48, 32};
  const std::uint64_t sizes[4] = {56, 28, 14, 7};
  const std::size_t growth = 32;
  const std::size_t bottleneck = 4 * growth;
  std::size_t channels = 64;
  for (int blk = 0; blk < 4; ++blk) {
    for (std::size_t i = 0; i < block_layers[blk]; ++i) {
      const std::string prefix = "features.denseblock" + std::to_string(blk + 1) +
                                 ".denselayer" + std::to_string(i + 1) + ".";
      b.conv(prefix + "conv1", channels, bottleneck, 1, 1, sizes[blk]);
      b.conv(prefix + "conv2", bottleneck, growth, 3, 3, sizes[blk]);
      channels += growth;
    }
    if (blk < 3) {
      b.conv("features.transition" + std::to_string(blk + 1) + ".conv",
             channels, channels / 2, 1, 1, sizes[blk]);
      channels /= 2;
    }
  }
  b.fc("classifier", channels, 1000);
  return b.take();
}

ArchitectureDims inception_v4() {
  Builder b("inception_v4", 16);
  // Stem.
  b.conv("stem.conv1", 3, 32, 3, 3, 149);
  b.conv("stem.conv2", 32, 32, 3, 3, 147);
  b.conv("stem.conv3", 32, 64, 3, 3, 147);
  b.conv("mixed_3a.conv", 64, 96, 3, 3, 73);
  b.conv("mixed_4a.b0.conv1", 160, 64, 1, 1, 73);
  b.conv("mixed_4a.b0.conv2", 64, 96, 3, 3, 71);
  b.conv("mixed_4a.b1.conv1", 160, 64, 1, 1, 73);
  b.conv("mixed_4a.b1.conv2", 64, 64, 1, 7, 73);
  b.conv("mixed_4a.b1.conv3", 64, 64, 7, 1, 73);
  b.conv("mixed_4a.b1.conv4", 64, 96, 3, 3, 71);
  b.conv("mixed_5a.conv", 192, 192, 3, 3, 35);

  for (int i = 0; i < 4; ++i) {
    const std::string p = "inception_a" + std::to_string(i + 1) + ".";
    b.conv(p + "b0", 384, 96, 1, 1, 35);
    b.conv(p + "b1.conv1", 384, 64, 1, 1, 35);
    b.conv(p + "b1.conv2", 64, 96, 3, 3, 35);
    b.conv(p + "b2.conv1", 384, 64, 1, 1, 35);
    b.conv(p + "b2.conv2", 64, 96, 3, 3, 35);
    b.conv(p + "b2.conv3", 96, 96, 3, 3, 35);
    b.conv(p + "b3.conv", 384, 96, 1, 1, 35);
  }

  b.conv("reduction_a.b0", 384, 384, 3, 3, 17);
  b.conv("reduction_a.b1.conv1", 384, 192, 1, 1, 35);
  b.conv("reduction_a.b1.conv2", 192, 224, 3, 3, 35);
  b.conv("reduction_a.b1.conv3", 224, 256, 3, 3, 17);

  for (int i = 0; i < 7; ++i) {
    const std::string p = "inception_b" + std::to_string(i + 1) + ".";
    b.conv(p + "b0", 1024, 384, 1, 1, 17);
    b.conv(p + "b1.conv1", 1024, 192, 1, 1, 17);
    b.conv(p + "b1.conv2", 192, 224, 1, 7, 17);
    b.conv(p + "b1.conv3", 224, 256, 7, 1, 17);
    b.conv(p + "b2.conv1", 1024, 192, 1, 1, 17);
    b.conv(p + "b2.conv2", 192, 192, 7, 1, 17);
    b.conv(p + "b2.conv3", 192, 224, 1, 7, 17);
    b.conv(p + "b2.conv4", 224, 224, 7, 1, 17);
    b.conv(p + "b2.conv5", 224, 256, 1, 7, 17);
    b.conv(p + "b3.conv", 1024, 128, 1, 1, 17);
  }

  b.conv("reduction_b.b0.conv1", 1024, 192, 1, 1, 17);
  b.conv("reduction_b.b0.conv2", 192, 192, 3, 3, 8);
  b.conv("reduction_b.b1.conv1", 1024, 256, 1, 1, 17);
  b.conv("reduction_b.b1.conv2", 256, 256, 1, 7, 17);
  b.conv("reduction_b.b1.conv3", 256, 320, 7, 1, 17);
  b.conv("reduction_b.b1.conv4", 320, 320, 3, 3, 8);

  for (int i = 0; i < 3; ++i) {
    const std::string p = "inception_c" + std::to_string(i + 1) + ".";
    b.conv(p + "b0", 1536, 256, 1, 1, 8);
    b.conv(p + "b1.conv1", 1536, 384, 1, 1, 8);
    b.conv(p + "b1.conv2a", 384, 256, 1, 3, 8);
    b.conv(p + "b1.conv2b", 384, 256, 3, 1, 8);
    b.conv(p + "b2.conv1", 1536, 384, 1, 1, 8);
    b.conv(p + "b2.conv2", 384, 448, 3, 1, 8);
    b.conv(p + "b2.conv3", 448, 512, 1, 3, 8);
    b.conv(p + "b2.conv4a", 512, 256, 1, 3, 8);
    b.conv(p + "b2.conv4b", 512, 256, 3, 1, 8);
    b.conv(p + "b3.conv", 1536, 256, 1, 1, 8);
  }

  b.fc("last_linear", 1536, 1000);
  return b.take();
}

}  // namespace

std::vector<std::string> bundled_models() {
  return {"resnet50", "resnet152", "densenet201", "inception_v4"};
}

ArchitectureDims architecture(std::string_view name) {
  if (name == "resnet50") {
    const std::size_t blocks[4] = {3, 4, 6, 3};
    return resnet("resnet50", 32, blocks);
  }
  if (name == "resnet152") {
    const std::size_t blocks[4] = {3, 8, 36, 3};
    return resnet("resnet152", 8, blocks);
  }
  if (name == "densenet201") return densenet201();
  if (name == "inception_v4") return inception_v4();
  throw ValidationError("unknown architecture '" + std::string(name) + "'");
}

TimingTargets bundled_targets(std::string_view model) {
  if (model == "resnet50") return {0.250, 0.250, 2.0};
  if (model == "resnet152") return {0.340, 0.510, 2.0};
  if (model == "densenet201") return {0.390, 0.580, 2.0};
  if (model == "inception_v4") return {0.290, 0.440, 2.0};
  throw ValidationError("no bundled timing targets for '" + std::string(model) +
                        "'");
}

}  // namespace kfacsched
