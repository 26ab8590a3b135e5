// Tests for the GRID1 binary container: bit-exact round trips, the empty
// container, and parse errors that name the offending byte offset.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "scalemix/common.hpp"
#include "scalemix/grid1.hpp"
#include "scalemix/tensor.hpp"

using namespace scalemix;

namespace {

std::string temp_path(const std::string& name) {
  return std::string(testing::TempDir()) + "grid1_test_" + name;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Grid1, RoundTripBitExactF64) {
  Rng rng(101);
  std::vector<Grid1Record> recs;
  recs.push_back({"alpha", kGrid1F64, Tensor({2, 3}, {1.0, -2.5, 3.25, 0.0, 1e-300, 7.0})});
  std::vector<double> big(60);
  for (auto& v : big) v = rng.normal();
  recs.push_back({"beta/with/slashes", kGrid1F64, Tensor({3, 4, 5}, std::move(big))});
  const std::string path = temp_path("roundtrip.grid1");
  grid1_write(path, recs);
  std::vector<Grid1Record> back = grid1_read(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "alpha");
  EXPECT_EQ(back[0].dtype, kGrid1F64);
  EXPECT_TRUE(back[0].data.bit_equal(recs[0].data));
  EXPECT_EQ(back[1].name, "beta/with/slashes");
  EXPECT_EQ(back[1].data.shape(), (Shape{3, 4, 5}));
  EXPECT_TRUE(back[1].data.bit_equal(recs[1].data));
  std::remove(path.c_str());
}

TEST(Grid1, RoundTripF32ExactOnRepresentableValues) {
  std::vector<Grid1Record> recs;
  recs.push_back({"f32rec", kGrid1F32, Tensor({4}, {1.5, -2.25, 1024.0, 0.0})});
  const std::string path = temp_path("f32.grid1");
  grid1_write(path, recs);
  std::vector<Grid1Record> back = grid1_read(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].dtype, kGrid1F32);
  EXPECT_TRUE(back[0].data.bit_equal(recs[0].data));
  std::remove(path.c_str());
}

TEST(Grid1, EmptyContainerIsValid) {
  const std::string path = temp_path("empty.grid1");
  grid1_write(path, {});
  EXPECT_TRUE(grid1_read(path).empty());
  std::remove(path.c_str());
}

TEST(Grid1, CorruptMagicNamesOffsetZero) {
  const std::string path = temp_path("badmagic.grid1");
  grid1_write(path, {{"x", kGrid1F64, Tensor({1}, {1.0})}});
  std::vector<char> bytes = slurp(path);
  bytes[0] = 'X';
  spit(path, bytes);
  try {
    grid1_read(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset, 0u);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
  std::remove(path.c_str());
}

TEST(Grid1, TruncatedPayloadReportsOffset) {
  const std::string path = temp_path("trunc.grid1");
  grid1_write(path, {{"x", kGrid1F64, Tensor({4}, {1.0, 2.0, 3.0, 4.0})}});
  std::vector<char> bytes = slurp(path);
  bytes.resize(bytes.size() - 9);  // cut into the payload
  spit(path, bytes);
  try {
    grid1_read(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset, 0u);
  }
  std::remove(path.c_str());
}

TEST(Grid1, UnknownDtypeRejectedAtItsOffset) {
  const std::string path = temp_path("dtype.grid1");
  grid1_write(path, {{"ab", kGrid1F64, Tensor({1}, {1.0})}});
  std::vector<char> bytes = slurp(path);
  // Header: magic 4 + version 2 + count 4 = 10; record: name_len 2 + "ab" 2;
  // dtype byte sits at offset 14.
  const size_t dtype_off = 14;
  ASSERT_EQ(bytes[dtype_off], 2);  // f64 code
  bytes[dtype_off] = 9;
  spit(path, bytes);
  try {
    grid1_read(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset, dtype_off);
  }
  std::remove(path.c_str());
}

TEST(Grid1, MissingFileIsParseError) {
  EXPECT_THROW(grid1_read(temp_path("does_not_exist.grid1")), ParseError);
}

TEST(Grid1, WriterRejectsOversizedNames) {
  std::string huge(70000, 'n');
  EXPECT_THROW(grid1_write(temp_path("huge.grid1"),
                           {{huge, kGrid1F64, Tensor({1}, {1.0})}}),
               ContractError);
}
