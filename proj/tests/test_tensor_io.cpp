#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "fastobq/tensor_io.hpp"

using namespace fastobq;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  auto d = fs::temp_directory_path() /
           ("fastobq_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
  fs::create_directories(d);
  return d;
}

std::vector<std::byte> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_raw(const fs::path& p, const std::vector<std::byte>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST(TensorIo, IdentityRoundTrip) {
  const auto dir = scratch_dir();
  const std::vector<float> id = {1, 0, 0, 1};
  const auto t = make_tensor<float>({2, 2}, id);
  write_tensor(t, dir / "id.ftns");
  const auto back = read_tensor(dir / "id.ftns");
  EXPECT_EQ(back.dims, (std::vector<std::uint64_t>{2, 2}));
  EXPECT_EQ(to_doubles(back), (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(back, t);
}

TEST(TensorIo, RandomRoundTripIsBitExact) {
  const auto dir = scratch_dir();
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> ndim(1, 4), extent(1, 6), dt(0, 3);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < 100; ++i) {
    TensorFile t;
    t.dtype = static_cast<DType>(dt(rng));
    const int nd = ndim(rng);
    for (int k = 0; k < nd; ++k) t.dims.push_back(static_cast<std::uint64_t>(extent(rng)));
    t.data.resize(t.element_count() * dtype_size(t.dtype));
    // Arbitrary bit patterns, including NaN payloads.
    for (auto& b : t.data) b = static_cast<std::byte>(byte(rng));
    const auto path = dir / ("t" + std::to_string(i) + ".ftns");
    write_tensor(t, path);
    ASSERT_EQ(read_tensor(path), t) << "tensor " << i;
  }
}

// 8 fixed header bytes + one u64 dim + one f64 payload.
TEST(TensorIo, ScalarF64FileSize) {
  const auto dir = scratch_dir();
  const std::vector<double> zero = {0.0};
  write_tensor(make_tensor<double>({1}, zero), dir / "s.ftns");
  EXPECT_EQ(fs::file_size(dir / "s.ftns"), 24u);
  EXPECT_EQ(header_size(1), 16u);
}

TEST(TensorIo, DeterministicBytes) {
  const auto dir = scratch_dir();
  const std::vector<double> v = {1.5, -2.25, 3.0};
  const auto t = make_tensor<double>({3}, v);
  write_tensor(t, dir / "a.ftns");
  write_tensor(t, dir / "b.ftns");
  EXPECT_EQ(file_bytes(dir / "a.ftns"), file_bytes(dir / "b.ftns"));
}

TEST(TensorIo, InvalidTensorRejectedBeforeWrite) {
  const auto dir = scratch_dir();
  TensorFile bad;
  bad.dtype = DType::f32;
  bad.dims = {3, 3};
  bad.data.resize(8 * 4);
  EXPECT_EQ(code_of([&] { write_tensor(bad, dir / "bad.ftns"); }), ErrorCode::invalid_tensor);
  EXPECT_FALSE(fs::exists(dir / "bad.ftns"));
  bad.dims = {0};
  bad.data.clear();
  EXPECT_EQ(code_of([&] { write_tensor(bad, dir / "bad.ftns"); }), ErrorCode::invalid_tensor);
}

TEST(TensorIo, TruncatedPayload) {
  const auto dir = scratch_dir();
  // Header declaring f32 [3,3] followed by only 8 floats.
  std::vector<std::byte> bytes;
  for (auto b : kTensorMagic) bytes.push_back(std::byte{b});
  bytes.push_back(std::byte{1});
  bytes.push_back(std::byte{0});
  bytes.push_back(std::byte{2});
  bytes.push_back(std::byte{0});
  detail::put_le<std::uint64_t>(bytes, 3);
  detail::put_le<std::uint64_t>(bytes, 3);
  for (int i = 0; i < 8; ++i) detail::put_scalar(bytes, 1.0f);
  write_raw(dir / "short.ftns", bytes);
  EXPECT_EQ(code_of([&] { read_tensor(dir / "short.ftns"); }), ErrorCode::truncated_payload);
}

TEST(TensorIo, BadMagicAndDtype) {
  const auto dir = scratch_dir();
  std::vector<std::byte> junk(32, std::byte{0x41});
  write_raw(dir / "junk.ftns", junk);
  EXPECT_EQ(code_of([&] { read_tensor(dir / "junk.ftns"); }), ErrorCode::bad_magic);

  const std::vector<float> one = {1.0f};
  auto bytes = encode_tensor(make_tensor<float>({1}, one));
  bytes[5] = std::byte{9};
  write_raw(dir / "dtype.ftns", bytes);
  EXPECT_EQ(code_of([&] { read_tensor(dir / "dtype.ftns"); }), ErrorCode::unsupported_dtype);
  EXPECT_EQ(code_of([&] { read_tensor(dir / "absent.ftns"); }), ErrorCode::missing_file);
}

// Golden vectors were produced independently with Python's struct module.
TEST(TensorIo, GoldenFilesParseAndReserializeIdentically) {
  const fs::path data = FASTOBQ_TEST_DATA;
  const auto f32 = read_tensor(data / "golden_f32_2x3.ftns");
  EXPECT_EQ(f32.dtype, DType::f32);
  EXPECT_EQ(f32.dims, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(to_doubles(f32), (std::vector<double>{1.0, -2.0, 0.5, 3.25, -0.125, 1024.0}));
  EXPECT_EQ(encode_tensor(f32), file_bytes(data / "golden_f32_2x3.ftns"));

  const auto i32 = read_tensor(data / "golden_i32_4.ftns");
  EXPECT_EQ(i32.dtype, DType::i32);
  EXPECT_EQ(to_doubles(i32), (std::vector<double>{-7, 0, 7, 2147483647}));
  EXPECT_EQ(encode_tensor(i32), file_bytes(data / "golden_i32_4.ftns"));
}

TEST(TensorIo, MatrixWidening) {
  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const auto t = from_matrix(m, DType::f32);
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(to_matrix(t), m);
}

class BundleTest : public ::testing::Test {
 protected:
  void SetUp() override { dir_ = scratch_dir(); }

  void write_matrix(const std::string& name, Eigen::Index r, Eigen::Index c) {
    write_tensor(from_matrix(Eigen::MatrixXd::Random(r, c), DType::f32), dir_ / name);
  }

  fs::path manifest(const std::string& body) {
    std::ofstream(dir_ / "manifest.json") << body;
    return dir_ / "manifest.json";
  }

  fs::path dir_;
};

TEST_F(BundleTest, HappyPath) {
  write_matrix("w.ftns", 4, 8);
  write_matrix("x.ftns", 8, 16);
  const auto layers = load_bundle(manifest(
      R"({"layers":[{"name":"fc1","weight":"w.ftns","calib":"x.ftns","metadata":{"kind":"linear"}}]})"));
  ASSERT_EQ(layers.size(), 1u);
  EXPECT_EQ(layers[0].name, "fc1");
  EXPECT_EQ(layers[0].d_row(), 4);
  EXPECT_EQ(layers[0].d_col(), 8);
  EXPECT_EQ(layers[0].n_samples(), 16);
  EXPECT_EQ(layers[0].metadata.at("kind"), "linear");
}

TEST_F(BundleTest, ShapeMismatch) {
  write_matrix("w.ftns", 4, 8);
  write_matrix("x.ftns", 9, 16);
  const auto m = manifest(R"({"layers":[{"name":"fc1","weight":"w.ftns","calib":"x.ftns"}]})");
  EXPECT_EQ(code_of([&] { load_bundle(m); }), ErrorCode::shape_mismatch);
}

TEST_F(BundleTest, EmptyAndMissing) {
  EXPECT_TRUE(load_bundle(manifest(R"({"layers":[]})")).empty());
  const auto m = manifest(R"({"layers":[{"name":"a","weight":"nope.ftns","calib":"x.ftns"}]})");
  EXPECT_EQ(code_of([&] { load_bundle(m); }), ErrorCode::missing_file);
  EXPECT_EQ(code_of([&] { load_bundle(manifest("{not json")); }), ErrorCode::bad_manifest);
}
