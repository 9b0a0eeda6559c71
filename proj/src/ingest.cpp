#include "shmkit/ingest.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string_view>
#include <unordered_map>

#include "shmkit/error.hpp"

namespace shmkit::ingest {

static_assert(std::endian::native == std::endian::little, "MSMX I/O assumes a little-endian host");

Matrix tpm_normalize(const CountTable& table)
{
    const auto& counts = table.counts;
    if (table.lengths.size() != counts.ncol())
        throw Error(ErrorCode::LengthMismatch, std::to_string(counts.ncol()) + " genes but " +
                                                   std::to_string(table.lengths.size()) + " lengths");
    for (std::size_t g = 0; g < table.lengths.size(); ++g) {
        if (!(table.lengths[g] > 0.0) || !std::isfinite(table.lengths[g])) {
            const auto gene = g < table.genes.size() ? table.genes[g] : "#" + std::to_string(g);
            throw Error(ErrorCode::NonPositiveLength, "gene " + gene + " has length " + std::to_string(table.lengths[g]));
        }
    }
    Matrix tpm(counts.nrow(), counts.ncol());
    std::vector<double> rate(counts.ncol());
    for (std::size_t i = 0; i < counts.nrow(); ++i) {
        double total = 0.0;
        for (std::size_t g = 0; g < counts.ncol(); ++g) {
            rate[g] = counts(i, g) / table.lengths[g];
            total += rate[g];
        }
        if (total == 0.0) continue;
        for (std::size_t g = 0; g < counts.ncol(); ++g) tpm(i, g) = rate[g] / total * 1e6;
    }
    return tpm;
}

void log2p1(Matrix& x) noexcept
{
    for (auto& v : x.values()) v = std::log2(v + 1.0);
}

namespace {

template <typename T>
void put(std::ostream& out, T v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(const char* p)
{
    T v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

std::string slurp(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw Error(ErrorCode::IoFailure, "failed reading " + path.string());
    return std::move(ss).str();
}

std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view line, char sep)
{
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        cells.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return cells;
}

bool parse_double(std::string_view cell, double& out)
{
    if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
    const auto* end = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(cell.data(), end, out);
    return ec == std::errc() && ptr == end && !cell.empty() && std::isfinite(out);
}

// Lines with their 1-based numbers, blank ones dropped.
std::vector<std::pair<std::size_t, std::string_view>> lines_of(std::string_view text)
{
    std::vector<std::pair<std::size_t, std::string_view>> out;
    std::size_t start = 0, number = 1;
    while (start <= text.size()) {
        auto pos = text.find('\n', start);
        if (pos == std::string_view::npos) pos = text.size();
        const auto line = trim(text.substr(start, pos - start));
        if (!line.empty()) out.emplace_back(number, line);
        start = pos + 1;
        ++number;
    }
    return out;
}

} // namespace

void write_matrix(const std::filesystem::path& path, const Matrix& x)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out.write("MSMX", 4);
    put<std::uint32_t>(out, kMatrixFileVersion);
    put<std::uint64_t>(out, x.nrow());
    put<std::uint64_t>(out, x.ncol());
    out.write(reinterpret_cast<const char*>(x.values().data()), static_cast<std::streamsize>(x.size() * sizeof(double)));
    out.flush();
    if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path.string());
}

Matrix read_matrix(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    char header[kMatrixHeaderBytes];
    in.read(header, sizeof header);
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got >= 4 && std::memcmp(header, "MSMX", 4) != 0) throw Error(ErrorCode::BadMagic, path.string() + " is not an MSMX file");
    if (got < kMatrixHeaderBytes) throw Error(ErrorCode::TruncatedFile, path.string() + ": header cut short");
    const auto version = get<std::uint32_t>(header + 4);
    if (version != kMatrixFileVersion)
        throw Error(ErrorCode::BadMagic, path.string() + ": unsupported MSMX version " + std::to_string(version));
    const auto nrow = get<std::uint64_t>(header + 8);
    const auto ncol = get<std::uint64_t>(header + 16);
    if (ncol != 0 && nrow > (std::uint64_t{1} << 60) / ncol)
        throw Error(ErrorCode::TruncatedFile, path.string() + ": implausible dimensions");

    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    const auto expected = kMatrixHeaderBytes + nrow * ncol * sizeof(double);
    if (!ec && file_size < expected)
        throw Error(ErrorCode::TruncatedFile, path.string() + ": " + std::to_string(file_size) + " bytes, expected " +
                                                  std::to_string(expected));
    std::vector<double> data(nrow * ncol);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != data.size() * sizeof(double))
        throw Error(ErrorCode::TruncatedFile, path.string() + ": payload cut short");
    return Matrix(nrow, ncol, std::move(data));
}

CsvMatrix read_csv_matrix(const std::filesystem::path& path, bool has_header)
{
    const auto text = slurp(path);
    const auto lines = lines_of(text);
    if (lines.empty() || (has_header && lines.size() == 1 && lines[0].second.empty()))
        throw Error(ErrorCode::EmptyFile, path.string() + " has no rows");

    CsvMatrix out;
    std::size_t first = 0;
    std::size_t width = 0;
    if (has_header) {
        for (auto cell : split(lines[0].second, ',')) out.names.emplace_back(cell);
        width = out.names.size();
        first = 1;
    }
    if (first >= lines.size()) throw Error(ErrorCode::EmptyFile, path.string() + " has a header but no rows");
    if (width == 0) width = split(lines[first].second, ',').size();

    const std::size_t nrow = lines.size() - first;
    std::vector<double> data(nrow * width);
    for (std::size_t r = 0; r < nrow; ++r) {
        const auto& [number, line] = lines[first + r];
        const auto cells = split(line, ',');
        if (cells.size() != width)
            throw Error(ErrorCode::RaggedRows, path.string() + ": line " + std::to_string(number) + " has " +
                                                   std::to_string(cells.size()) + " cells, expected " +
                                                   std::to_string(width));
        for (std::size_t c = 0; c < width; ++c) {
            double v;
            if (!parse_double(cells[c], v))
                throw Error(ErrorCode::NonNumericCell, path.string() + ": line " + std::to_string(number) + ", column " +
                                                           std::to_string(c + 1) + ": '" + std::string(cells[c]) + "'");
            data[c * nrow + r] = v;
        }
    }
    out.values = Matrix(nrow, width, std::move(data));
    return out;
}

Labels read_labels(const std::filesystem::path& path)
{
    const auto text = slurp(path);
    Labels out;
    std::unordered_map<std::string, std::uint32_t> ids;
    for (const auto& [number, line] : lines_of(text)) {
        std::string token(line);
        auto [it, inserted] = ids.try_emplace(token, static_cast<std::uint32_t>(out.names.size()));
        if (inserted) out.names.push_back(token);
        out.ids.push_back(it->second);
    }
    if (out.ids.empty()) throw Error(ErrorCode::EmptyFile, path.string() + " has no labels");
    return out;
}

std::map<std::string, double> read_gene_lengths(const std::filesystem::path& path)
{
    const auto text = slurp(path);
    const auto lines = lines_of(text);
    if (lines.empty()) throw Error(ErrorCode::EmptyFile, path.string() + " has no rows");
    std::map<std::string, double> out;
    for (std::size_t k = 0; k < lines.size(); ++k) {
        const auto& [number, line] = lines[k];
        const auto cells = split(line, ',');
        if (cells.size() != 2)
            throw Error(ErrorCode::RaggedRows, path.string() + ": line " + std::to_string(number) + " needs gene,length");
        double len;
        if (!parse_double(cells[1], len)) {
            if (k == 0) continue;
            throw Error(ErrorCode::NonNumericCell, path.string() + ": line " + std::to_string(number) + ": '" +
                                                       std::string(cells[1]) + "'");
        }
        out.insert_or_assign(std::string(cells[0]), len);
    }
    return out;
}

CountTable make_count_table(Matrix counts, std::vector<std::string> genes, const std::map<std::string, double>& lengths)
{
    if (genes.size() != counts.ncol())
        throw Error(ErrorCode::LengthMismatch, std::to_string(counts.ncol()) + " count columns but " +
                                                   std::to_string(genes.size()) + " gene names");
    CountTable t;
    for (const auto& g : genes) {
        auto it = lengths.find(g);
        if (it == lengths.end()) throw Error(ErrorCode::MissingLength, "no length for gene " + g);
        t.lengths.push_back(it->second);
    }
    t.genes = std::move(genes);
    t.counts = std::move(counts);
    return t;
}

CsvMatrix read_any_matrix(const std::filesystem::path& path)
{
    char magic[4] = {};
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
        in.read(magic, 4);
    }
    if (std::memcmp(magic, "MSMX", 4) == 0) return {read_matrix(path), {}};
    return read_csv_matrix(path, true);
}

} // namespace shmkit::ingest
