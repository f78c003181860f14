// Peak heap use while streaming the columns of a 1000 x 82944 activation
// file. Global operator new is replaced to track live bytes, so this test
// lives in its own executable.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <new>

#include "neuronscope/activation_store.hpp"

namespace {

std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};

void note_alloc(std::size_t n) {
  const auto live = g_live.fetch_add(n) + n;
  auto peak = g_peak.load();
  while (live > peak && !g_peak.compare_exchange_weak(peak, live)) {
  }
}

// Each block stores its size in a 16-byte prefix.
void* tracked_alloc(std::size_t n) {
  auto* p = static_cast<unsigned char*>(std::malloc(n + 16));
  if (!p) throw std::bad_alloc();
  *reinterpret_cast<std::size_t*>(p) = n;
  note_alloc(n);
  return p + 16;
}

void tracked_free(void* ptr) noexcept {
  if (!ptr) return;
  auto* p = static_cast<unsigned char*>(ptr) - 16;
  g_live.fetch_sub(*reinterpret_cast<std::size_t*>(p));
  std::free(p);
}

}  // namespace

void* operator new(std::size_t n) { return tracked_alloc(n); }
void* operator new[](std::size_t n) { return tracked_alloc(n); }
void operator delete(void* p) noexcept { tracked_free(p); }
void operator delete[](void* p) noexcept { tracked_free(p); }
void operator delete(void* p, std::size_t) noexcept { tracked_free(p); }
void operator delete[](void* p, std::size_t) noexcept { tracked_free(p); }

int main() {
  using namespace nscope;
  constexpr std::size_t kRows = 1000;
  constexpr std::size_t kChunk = 64;
  const UnitCatalog catalog(768, 12);
  const auto path = std::filesystem::temp_directory_path() / "nscope_column_memory.nsac";
  {
    std::vector<std::uint8_t> labels(kRows, 0);
    for (std::size_t r = 0; r < kRows; r += 2) labels[r] = 1;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    ActivationWriter writer(out, "memory", catalog, labels);
    std::vector<float> row(catalog.total_units());
    for (std::size_t r = 0; r < kRows; ++r) {
      for (std::size_t m = 0; m < row.size(); ++m) row[m] = static_cast<float>((r * 31 + m) % 97);
      writer.append_row(row);
    }
    writer.finish();
  }

  const ActivationFile file(path.string());
  const auto baseline = g_live.load();
  g_peak.store(baseline);
  std::uint64_t columns = 0;
  double checksum = 0.0;
  auto cursor = file.cursor(kChunk);
  ColumnChunk* chunk = nullptr;
  while (cursor.next(chunk)) {
    for (std::size_t j = 0; j < chunk->count; ++j) checksum += chunk->column(j)[j % kRows];
    columns += chunk->count;
  }
  const auto peak = g_peak.load() - baseline;
  std::filesystem::remove(path);

  const std::size_t bound = kRows * kChunk * 4 + 64 * 1024;
  std::printf("columns=%llu peak_extra_bytes=%zu bound=%zu checksum=%g\n",
              static_cast<unsigned long long>(columns), peak, bound, checksum);
  if (columns != catalog.total_units()) {
    std::printf("FAIL: visited %llu columns\n", static_cast<unsigned long long>(columns));
    return 1;
  }
  if (peak >= bound) {
    std::printf("FAIL: peak memory above bound\n");
    return 1;
  }
  std::printf("PASS\n");
  return 0;
}
