// bvit-synth: write a seeded synthetic separable dataset file.

#include "bvit/data.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic BViT dataset"};
  std::string out = "synth.bvds";
  std::uint64_t seed = 0;
  std::uint32_t count = 256, h = 32, w = 32, c = 3, classes = 4;
  double noise = 0.1;
  app.add_option("--out", out, "output path");
  app.add_option("--seed", seed, "rng seed");
  app.add_option("--count", count, "number of images");
  app.add_option("--height", h, "image height");
  app.add_option("--width", w, "image width");
  app.add_option("--channels", c, "channels");
  app.add_option("--classes", classes, "number of classes");
  app.add_option("--noise", noise, "noise level in [0,1]");
  CLI11_PARSE(app, argc, argv);
  try {
    bvit::save_dataset(bvit::synth_dataset(seed, count, h, w, c, classes, noise), out);
    std::cout << "wrote " << out << " (" << count << " images, " << classes << " classes)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
