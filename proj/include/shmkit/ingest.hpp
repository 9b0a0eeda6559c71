#pragma once

// Input side of the feature-selection pipeline: count tables, TPM, the MSMX
// binary matrix format and the CSV/label readers.
//
// MSMX layout, little-endian:
//   0  magic   "MSMX"
//   4  version u32 (1)
//   8  nrow    u64
//   16 ncol    u64
//   24 payload nrow*ncol f64, column-major

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "shmkit/matrix.hpp"

namespace shmkit::ingest {

inline constexpr std::uint32_t kMatrixFileVersion = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 24;

struct CountTable {
    std::vector<std::string> genes;
    std::vector<double> lengths; // bases, one per gene
    Matrix counts;               // cases x genes
};

// Per case: rate_i = r_i / l_i, TPM_i = rate_i / sum(rate) * 1e6; a case
// without reads stays all zero. Errors: NonPositiveLength, LengthMismatch.
Matrix tpm_normalize(const CountTable& table);

// In place log2(x + 1).
void log2p1(Matrix& x) noexcept;

void write_matrix(const std::filesystem::path& path, const Matrix& x);
// Errors: IoFailure, BadMagic, TruncatedFile.
Matrix read_matrix(const std::filesystem::path& path);

struct CsvMatrix {
    Matrix values;
    std::vector<std::string> names; // header cells, or empty
};

// Comma separated, '.' decimal. Errors: EmptyFile, RaggedRows (with line
// number), NonNumericCell, IoFailure.
CsvMatrix read_csv_matrix(const std::filesystem::path& path, bool has_header);

struct Labels {
    std::vector<std::uint32_t> ids;   // interned in first-appearance order
    std::vector<std::string> names;   // names[id]
};

// One token per line; blank lines are ignored. Errors: EmptyFile, IoFailure.
Labels read_labels(const std::filesystem::path& path);

// Two columns: gene id, length. A first line whose length is not numeric is
// taken as a header.
std::map<std::string, double> read_gene_lengths(const std::filesystem::path& path);

// Errors: MissingLength naming the first gene without a length.
CountTable make_count_table(Matrix counts, std::vector<std::string> genes,
                            const std::map<std::string, double>& lengths);

// Matrix from .msmx (by magic) or CSV with header.
CsvMatrix read_any_matrix(const std::filesystem::path& path);

} // namespace shmkit::ingest
