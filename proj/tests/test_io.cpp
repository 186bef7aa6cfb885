#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "modlab/checkpoint.hpp"
#include "modlab/dataset_io.hpp"

namespace sp = modlab::sampling;
namespace io = modlab::io;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("modlab_io_" + name);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(LittleEndian, Bytes) {
    std::string s;
    io::put_le<std::uint32_t>(s, 0x01020304u);
    EXPECT_EQ(s, std::string("\x04\x03\x02\x01", 4));
    EXPECT_EQ(io::get_le<std::uint32_t>(s.data()), 0x01020304u);
    std::string d;
    io::put_le(d, -1.5);
    EXPECT_EQ(io::get_le<double>(d.data()), -1.5);
}

TEST(Dataset, RoundTrip) {
    auto ds = sp::generate_dataset(8, 31, sp::Distribution::sparse, 1000, 5);
    ds.meta.manifest_hash = "abc";
    const auto path = temp_path("rt.bin");
    io::write_dataset(path, ds);
    const auto back = io::read_dataset(path);
    EXPECT_EQ(back.meta, ds.meta);
    EXPECT_EQ(back.examples, ds.examples);
    const auto path2 = temp_path("rt2.bin");
    io::write_dataset(path2, back);
    EXPECT_EQ(slurp(path), slurp(path2));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST(Dataset, SeedReplay) {
    const auto ds = sp::generate_dataset(8, 31, sp::Distribution::uniform, 500, 9);
    const auto path = temp_path("replay.bin");
    io::write_dataset(path, ds);
    const auto back = io::read_dataset(path);
    const auto regen = sp::generate_dataset(back.meta.n, back.meta.q, back.meta.distribution, back.meta.count, back.meta.seed);
    EXPECT_EQ(regen.examples, back.examples);
    std::filesystem::remove(path);
}

TEST(Dataset, RejectsOutOfRangeEntryNamingRow) {
    auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 10, 1);
    const auto path = temp_path("bad.bin");
    io::write_dataset(path, ds);
    std::string bytes = slurp(path);
    const std::size_t header = bytes.find('\n') + 1;
    const std::size_t row = 4 * 4 + 16;
    // Row 6, entry 0 becomes 7 (== q).
    bytes[header + 6 * row] = 7;
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    try {
        (void)io::read_dataset(path);
        FAIL() << "expected a FormatError";
    } catch (const modlab::FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("row 6"), std::string::npos) << e.what();
    }
    std::filesystem::remove(path);
}

TEST(Dataset, RejectsSchemaVersionAndTruncation) {
    auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 10, 1);
    const auto path = temp_path("ver.bin");
    io::write_dataset(path, ds);
    std::string bytes = slurp(path);
    const auto pos = bytes.find("\"version\":1");
    ASSERT_NE(pos, std::string::npos);
    std::string v2 = bytes;
    v2.replace(pos, 11, "\"version\":2");
    std::ofstream(path, std::ios::binary | std::ios::trunc) << v2;
    EXPECT_THROW((void)io::read_dataset(path), modlab::FormatError);
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 3);
    EXPECT_THROW((void)io::read_dataset(path), modlab::FormatError);
    std::filesystem::remove(path);
    EXPECT_THROW((void)io::read_dataset(path), modlab::FormatError);
}

TEST(Dataset, RejectsInconsistentLabels) {
    auto ds = sp::generate_dataset(4, 7, sp::Distribution::uniform, 3, 1);
    ds.examples[1].quotient += 1;
    const auto path = temp_path("lab.bin");
    io::write_dataset(path, ds);
    EXPECT_THROW((void)io::read_dataset(path), modlab::FormatError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, RoundTripAndHashGuard) {
    modlab::model::ModelConfig c;
    c.layers = 1;
    c.d_model = 8;
    c.d_ffn = 16;
    c.heads = 2;
    c.spec = {4, 7, 3, 0.2};
    modlab::model::Model<float> m(c, 3);
    const auto path = temp_path("m.ckpt");
    modlab::checkpoint::save_model(path, m, {{"seed", 3}});
    const auto back = modlab::checkpoint::load_model<float>(path);
    ASSERT_EQ(back.parameters().size(), m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i)
        EXPECT_EQ(back.parameters()[i].value.storage(), m.parameters()[i].value.storage());
    const auto contents = modlab::checkpoint::read(path);
    EXPECT_EQ(contents.manifest["seed"], 3);
    EXPECT_EQ(contents.manifest["config_hash"], modlab::model::config_hash(c));

    std::string bytes = slurp(path);
    const auto pos = bytes.find("\"d_ffn\":16");
    ASSERT_NE(pos, std::string::npos);
    bytes.replace(pos, 10, "\"d_ffn\":17");
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    EXPECT_THROW((void)modlab::checkpoint::read(path), modlab::FormatError);
    std::filesystem::remove(path);
}
