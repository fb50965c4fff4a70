#include "mstkd/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mstkd {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; byte swapping is not implemented");

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw value_error("tensor read: truncated header");
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    const char magic = static_cast<char>(kTensorMagic);
    os.write(&magic, 1);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) {
        write_u32(os, static_cast<std::uint32_t>(t.extent(d)));
    }
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    if (!os) throw value_error("tensor write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic = 0;
    is.read(&magic, 1);
    if (!is || static_cast<unsigned char>(magic) != kTensorMagic) {
        throw value_error("tensor read: bad magic byte");
    }
    const std::uint32_t rank = read_u32(is);
    if (rank > 16) throw value_error("tensor read: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
        e = static_cast<std::int64_t>(read_u32(is));
        if (e <= 0) throw value_error("tensor read: non-positive extent");
    }
    const auto n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw value_error("tensor read: truncated payload");
    return Tensor::from_data(shape, std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw value_error("cannot open for write: " + path);
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw value_error("cannot open for read: " + path);
    return read_tensor(is);
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw value_error("cannot open for write: " + path);
    std::ostringstream manifest;
    for (const auto& nt : tensors) {
        manifest << nt.name << '\t';
        for (int d = 0; d < nt.tensor.rank(); ++d) {
            if (d) manifest << 'x';
            manifest << nt.tensor.extent(d);
        }
        manifest << '\t' << os.tellp() << '\n';
        write_tensor(os, nt.tensor);
    }
    os.close();
    std::ofstream ms(path + ".manifest");
    if (!ms) throw value_error("cannot open for write: " + path + ".manifest");
    ms << manifest.str();
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream ms(path + ".manifest");
    if (!ms) throw value_error("cannot open for read: " + path + ".manifest");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw value_error("cannot open for read: " + path);

    std::vector<NamedTensor> result;
    std::string line;
    while (std::getline(ms, line)) {
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw value_error("checkpoint manifest: malformed line: " + line);
        }
        const std::string name = line.substr(0, t1);
        const long long offset = std::stoll(line.substr(t2 + 1));
        is.seekg(offset);
        result.push_back({name, read_tensor(is)});
    }
    return result;
}

}  // namespace mstkd
