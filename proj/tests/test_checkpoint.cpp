#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "grunlab/checkpoint.hpp"

using namespace grunlab;

namespace {
const std::string kDir = "/tmp/grunlab_test_ckpt";

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.vocab_size = 23;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.ff_mult = 2;
  return cfg;
}
}  // namespace

TEST_CASE("checkpoint: byte layout of a single tensor file") {
  std::filesystem::create_directories(kDir);
  const std::string path = kDir + "/single.ckpt";
  write_checkpoint_file(path, {{"t", {2}, {1.0f, 2.0f}}});
  const std::string bytes = read_text_file(path);
  // header(8) + version(4) + count(4) + name_len(2) + name(1) + dtype(1)
  // + rank(1) + dims(4) + payload(8)
  REQUIRE(bytes.size() == 8 + 4 + 4 + 2 + 1 + 1 + 1 + 4 + 8);
  CHECK(bytes.substr(0, 8) == "GRUNCKPT");
  const unsigned char* p =
      reinterpret_cast<const unsigned char*>(bytes.data());
  CHECK(p[8] == 1);  // version LE
  CHECK(p[12] == 1);  // tensor count
  CHECK(p[16] == 1);  // name length
  CHECK(bytes[18] == 't');
  CHECK(p[19] == 0);  // dtype f32
  CHECK(p[20] == 1);  // rank
  CHECK(p[21] == 2);  // dim 2
  // payload: 0x3F800000 then 0x40000000, little-endian
  CHECK(p[25] == 0x00);
  CHECK(p[26] == 0x00);
  CHECK(p[27] == 0x80);
  CHECK(p[28] == 0x3F);
  CHECK(p[29] == 0x00);
  CHECK(p[30] == 0x00);
  CHECK(p[31] == 0x00);
  CHECK(p[32] == 0x40);
}

TEST_CASE("checkpoint: model + stack round trip is bit exact") {
  std::filesystem::create_directories(kDir);
  ModelConfig cfg = small_cfg();
  Model<float> model(cfg, 42);
  Rng rng(9);
  GrunStack<float> stack;
  stack.push_request(GrunStack<float>::make_request({1, 2}, cfg.d_model, 3,
                                                    GateKind::kMlp, 6, rng));
  stack.push_request(GrunStack<float>::make_request({1, 2}, cfg.d_model, 3,
                                                    GateKind::kMlp, 6, rng));
  stack.coeff = 0.5f;
  const std::string path = kDir + "/model.ckpt";
  save_checkpoint(model, stack, path);
  LoadedCheckpoint loaded = load_checkpoint(path);

  CHECK(loaded.model.parameter_hash() == model.parameter_hash());
  CHECK(loaded.stack.size() == 2);
  CHECK(loaded.stack.coeff == 0.5f);
  auto orig = stack.named_parameters();
  auto back = loaded.stack.named_parameters();
  REQUIRE(orig.size() == back.size());
  for (size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == back[i].first);
    const auto& a = orig[i].second.value();
    const auto& b = back[i].second.value();
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }

  // save -> load -> save produces identical bytes
  const std::string path2 = kDir + "/model2.ckpt";
  save_checkpoint(loaded.model, loaded.stack, path2);
  CHECK(read_text_file(path) == read_text_file(path2));
}

TEST_CASE("checkpoint: corrupt magic and truncation name the offset") {
  std::filesystem::create_directories(kDir);
  const std::string path = kDir + "/bad.ckpt";
  write_checkpoint_file(path, {{"t", {2}, {1.0f, 2.0f}}});
  std::string bytes = read_text_file(path);

  std::string corrupt = bytes;
  corrupt[0] = 'X';
  write_text_file(path, corrupt);
  try {
    read_checkpoint_file(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  write_text_file(path, bytes.substr(0, bytes.size() - 3));
  try {
    read_checkpoint_file(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  // bad version
  std::string vbad = bytes;
  vbad[8] = 9;
  write_text_file(path, vbad);
  CHECK_THROWS_AS(read_checkpoint_file(path), FormatError);
}
