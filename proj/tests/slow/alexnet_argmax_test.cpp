#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>

#include "elb/emu.hpp"
#include "elb/zoo.hpp"

using namespace elb;

// Full-size AlexNet at 8 bits everywhere: the top-1 class of the integer
// emulator agrees with the float reference on at least 95 of 100 random
// weight draws, each evaluated on its own random image.
TEST(AlexNet8888, ArgmaxAgreesWithFloat) {
  const auto g = zoo_model(ZooModel::AlexNet);
  const auto scheme = parse_precision_tag("Alexnet-8-8888");
  const int draws = 100;
  int agree = 0;
  for (int d = 0; d < draws; ++d) {
    const auto wf = synthesize_weights(g, 7000 + static_cast<std::uint64_t>(d));
    const auto m = quantize_model(g, wf, scheme);
    const auto img = synthetic_image(g.input_shape, 9000 + static_cast<std::uint64_t>(d));
    const auto q = run_network(g, m, img).output;
    const auto f = float_reference(g, wf, img);
    const bool same = argmax(std::span<const std::int32_t>(q.codes)) == argmax(std::span<const double>(f.data));
    agree += same;
    if (!same) std::printf("draw %d disagrees\n", d);
  }
  std::printf("argmax agreement %d/%d\n", agree, draws);
  EXPECT_GE(agree, 95);
}
