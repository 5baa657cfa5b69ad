#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rft/errors.hpp"
#include "rft/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "write procedurally generated mnist/cifar10 files in the real on-disk "
      "formats"};
  std::string dir = "data";
  int mnist_train = 60000;
  int mnist_test = 10000;
  int cifar_train_files = 5;
  std::uint64_t seed = 9;
  app.add_option("--dir", dir, "root directory (mnist/ and cifar10/ inside)");
  app.add_option("--mnist-train", mnist_train, "mnist train example count");
  app.add_option("--mnist-test", mnist_test, "mnist test example count");
  app.add_option("--cifar-train-files", cifar_train_files,
                 "cifar train files to write, 0-5 (test_batch.bin always)");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  try {
    namespace fs = std::filesystem;
    fs::create_directories(dir + "/mnist");
    fs::create_directories(dir + "/cifar10");
    rft::write_synth_mnist(dir + "/mnist", mnist_train, mnist_test, seed);
    rft::write_synth_cifar10(dir + "/cifar10", cifar_train_files, seed);
    std::cout << "wrote " << dir << "/mnist and " << dir << "/cifar10"
              << std::endl;
  } catch (const rft::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}
